//! Command-level orchestration: resolve data, run the requested pipeline, and
//! write every artifact under a config-hash-named output directory so
//! identical configs reproduce byte-identical outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Scheme};
use crate::corpus::{self, Dataset};
use crate::decoder::{ensemble_predict, predict_path};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::hierarchy::LabelHierarchy;
use crate::metrics::{build_report, EvalReport};
use crate::model::{EvalOutputs, ForwardOptions, Model};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::training::{self, coupled_loss_node, load_checkpoint, save_checkpoint, EpochMetrics};

/// Aligned predicted paths, gold paths, and per-instance path validity.
pub type EvalPaths = (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<bool>);

/// Environment variable overriding the configured output root.
pub const OUT_ROOT_ENV: &str = "LABELSEQ_OUT";

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// `<out_root>/<config-hash>`, creating it if needed.
pub fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| config.out_root.clone());
    let dir = Path::new(&root).join(config.hash());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Resolve the corpus: external files when configured, otherwise the
/// generated synthetic corpus.
pub fn load_data(config: &RunConfig) -> Result<(LabelHierarchy, Dataset, Dataset, Dataset)> {
    if config.data.is_external() {
        let read = |field: &str, path: &Option<String>| -> Result<String> {
            let path = path.as_ref().ok_or_else(|| {
                Error::config(format!("data.{field} is required when data.hierarchy is set"))
            })?;
            std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read data.{field} '{path}': {e}")))
        };
        let hierarchy =
            LabelHierarchy::parse(&read("hierarchy", &config.data.hierarchy)?)?;
        let max_len = config.model.max_arg_len;
        let train = corpus::load_jsonl(&read("train", &config.data.train)?, &hierarchy, max_len)?;
        let valid = corpus::load_jsonl(&read("valid", &config.data.valid)?, &hierarchy, max_len)?;
        let test = corpus::load_jsonl(&read("test", &config.data.test)?, &hierarchy, max_len)?;
        Ok((hierarchy, train, valid, test))
    } else {
        corpus::generate_synthetic(&config.synthetic)
    }
}

fn write_config_echo(config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("config.json"), config.to_canonical_json() + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub struct SynthOutcome {
    pub dir: PathBuf,
    pub hierarchy_nodes: usize,
    pub parent_pairs: usize,
    pub edges_with_self_loops: usize,
    pub split_sizes: (usize, usize, usize),
}

/// Generate the synthetic corpus and write hierarchy + three split files.
pub fn run_synth(config: &RunConfig) -> Result<SynthOutcome> {
    let (hierarchy, train, valid, test) = corpus::generate_synthetic(&config.synthetic)?;
    let dir = output_dir(config)?;
    write_config_echo(config, &dir)?;
    let doc = serde_json::to_string_pretty(&hierarchy.to_doc())?;
    std::fs::write(dir.join("hierarchy.json"), doc + "\n")?;
    for (name, ds) in [("train", &train), ("valid", &valid), ("test", &test)] {
        std::fs::write(
            dir.join(format!("{name}.jsonl")),
            corpus::dataset_to_jsonl(ds, &hierarchy),
        )?;
    }
    Ok(SynthOutcome {
        dir,
        hierarchy_nodes: hierarchy.num_nodes(),
        parent_pairs: hierarchy.parent_pair_count(),
        edges_with_self_loops: hierarchy.edge_count_with_self_loops(),
        split_sizes: (train.len(), valid.len(), test.len()),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

pub fn run_train(config: &RunConfig) -> Result<TrainArtifacts> {
    let (hierarchy, train_ds, valid_ds, _) = load_data(config)?;
    let outcome = training::train(config, hierarchy, &train_ds, &valid_ds)?;
    let dir = output_dir(config)?;
    write_config_echo(config, &dir)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut lines = String::new();
    for entry in &outcome.log {
        lines.push_str(&serde_json::to_string(entry)?);
        lines.push('\n');
    }
    std::fs::write(&metrics_path, lines)?;
    let checkpoint_path = dir.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &checkpoint_path)?;
    Ok(TrainArtifacts {
        dir,
        checkpoint_path,
        metrics_path,
        best_epoch: outcome.checkpoint.epoch,
        log: outcome.log,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Forward a labeled dataset under one decoding scheme.
pub fn eval_dataset(
    model: &Model,
    dataset: &Dataset,
    scheme: Scheme,
) -> Result<EvalPaths> {
    if scheme == Scheme::Multitask && !model.flags.multitask_baseline {
        return Err(Error::Evaluation(
            "multitask scheme requires a multitask-baseline checkpoint".to_string(),
        ));
    }
    if scheme != Scheme::Multitask && model.flags.multitask_baseline {
        return Err(Error::Evaluation(format!(
            "scheme '{}' requires sequence decoders, but the checkpoint is a multitask baseline",
            scheme.name()
        )));
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let mut golds = Vec::with_capacity(dataset.len());
    let mut validity = Vec::with_capacity(dataset.len());
    let needs_aux = matches!(scheme, Scheme::BottomUp | Scheme::Ensemble);
    let opts = ForwardOptions {
        run_aux: needs_aux && !model.flags.multitask_baseline,
        ..ForwardOptions::eval()
    };
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    for chunk in dataset.instances.chunks(64) {
        let mut tape = Tape::new();
        let ctx = model.batch_context(&mut tape);
        for inst in chunk {
            let fwd = model.forward_instance(&mut tape, &ctx, inst, &opts, &mut rng)?;
            let outs = EvalOutputs::materialize(model, &tape, &fwd);
            let dists = match scheme {
                Scheme::TopDown | Scheme::Multitask => outs.main.expect("main scheme ran"),
                Scheme::BottomUp => outs.aux.expect("auxiliary decoder ran"),
                Scheme::Ensemble => ensemble_predict(
                    &outs.main.expect("main scheme ran"),
                    &outs.aux.expect("auxiliary decoder ran"),
                )?,
            };
            let (path, valid) = predict_path(&dists, &model.hierarchy)?;
            preds.push(path);
            golds.push(inst.gold_path.clone());
            validity.push(valid);
        }
    }
    Ok((preds, golds, validity))
}

pub struct EvalArtifacts {
    pub dir: PathBuf,
    pub report_path: PathBuf,
    pub report: EvalReport,
}

pub fn run_eval(config: &RunConfig, checkpoint_path: &Path) -> Result<EvalArtifacts> {
    let record = load_checkpoint(checkpoint_path)?;
    let (hierarchy, _, _, test_ds) = load_data(config)?;
    if hierarchy.to_doc() != record.model.hierarchy.to_doc() {
        return Err(Error::Evaluation(
            "checkpoint hierarchy does not match the evaluation data's hierarchy".to_string(),
        ));
    }
    let scheme = config.eval.scheme;
    let (preds, golds, validity) = eval_dataset(&record.model, &test_ds, scheme)?;
    let echo = serde_json::to_value(config)?;
    let report = build_report(
        scheme.name(),
        &preds,
        &golds,
        &validity,
        &record.model.hierarchy,
        config.seed,
        echo,
    )?;
    let dir = output_dir(config)?;
    write_config_echo(config, &dir)?;
    let report_path = dir.join("report.json");
    crate::metrics::write_report(&report, &report_path)?;
    Ok(EvalArtifacts { dir, report_path, report })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PredictionLine {
    arg1: String,
    arg2: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<String>>,
    pred: Vec<(String, Vec<String>)>,
    valid: Vec<(String, bool)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distributions: Option<Vec<(String, Vec<Vec<f64>>)>>,
}

pub struct PredictArtifacts {
    pub dir: PathBuf,
    pub dump_path: PathBuf,
    pub lines: usize,
}

/// Predict label paths for a JSONL input (labels optional) and dump one JSON
/// object per instance covering every scheme the checkpoint supports.
pub fn run_predict(
    config: &RunConfig,
    checkpoint_path: &Path,
    input_path: &Path,
) -> Result<PredictArtifacts> {
    let record = load_checkpoint(checkpoint_path)?;
    let model = &record.model;
    let text = std::fs::read_to_string(input_path)
        .map_err(|e| Error::config(format!("cannot read input '{}': {e}", input_path.display())))?;
    let dataset =
        corpus::load_jsonl_unlabeled(&text, &model.hierarchy, model.cfg.max_arg_len)?;

    let mut out = String::new();
    for inst in &dataset.instances {
        let outs = model.eval_instance(inst)?;
        let mut schemes = Vec::new();
        if let Some(main) = &outs.main {
            schemes.push(main.clone());
        }
        if let Some(aux) = &outs.aux {
            schemes.push(aux.clone());
            schemes.push(ensemble_predict(outs.main.as_ref().expect("main ran"), aux)?);
        }
        let mut pred = Vec::new();
        let mut valid = Vec::new();
        let mut distributions = Vec::new();
        for dists in &schemes {
            let (path, ok) = predict_path(dists, &model.hierarchy)?;
            let names: Vec<String> = path
                .iter()
                .enumerate()
                .map(|(m, &idx)| model.hierarchy.label_name(m + 1, idx).to_string())
                .collect();
            pred.push((dists.scheme.name().to_string(), names));
            valid.push((dists.scheme.name().to_string(), ok));
            if config.eval.dump_distributions {
                distributions.push((
                    dists.scheme.name().to_string(),
                    dists.dists.iter().map(|d| d.values().to_vec()).collect(),
                ));
            }
        }
        let gold = if inst.gold_path.is_empty() {
            None
        } else {
            Some(
                inst.gold_path
                    .iter()
                    .enumerate()
                    .map(|(m, &idx)| model.hierarchy.label_name(m + 1, idx).to_string())
                    .collect(),
            )
        };
        let line = PredictionLine {
            arg1: inst.arg1.join(" "),
            arg2: inst.arg2.join(" "),
            gold,
            pred,
            valid,
            distributions: if config.eval.dump_distributions {
                Some(distributions)
            } else {
                None
            },
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    let dir = output_dir(config)?;
    write_config_echo(config, &dir)?;
    let dump_path = dir.join("predictions.jsonl");
    std::fs::write(&dump_path, out)?;
    Ok(PredictArtifacts { dir, dump_path, lines: dataset.len() })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub passed: bool,
    pub params_checked: usize,
}

/// Verify end-to-end analytic gradients against central differences on a tiny
/// model over one synthetic batch.
///
/// The verified loss couples both decoders with no stop-gradients (both
/// cross-entropies and both divergence directions live), so every partition
/// sits on the differentiated path; stop-gradient behavior is covered by the
/// exact partition tests instead. `corrupt` perturbs one parameter's analytic
/// gradient as a negative control.
pub fn run_gradcheck(config: &RunConfig, corrupt: Option<&str>) -> Result<GradcheckOutcome> {
    let gc = &config.gradcheck;
    let (hierarchy, train_ds, _, _) = load_data(config)?;
    let instances: Vec<_> =
        train_ds.instances.iter().take(gc.instances.max(1)).cloned().collect();
    let batch_ds = Dataset { instances };
    let vocab = corpus::Vocab::build(&batch_ds, 1)?;
    let model = Model::build(
        gc.model.clone(),
        crate::config::AblationFlags::default(),
        hierarchy,
        vocab,
        config.seed,
    )?;

    let lambda = 1.0;
    let forward_loss = |model: &Model| -> Result<(Tape, crate::tape::NodeId)> {
        let mut tape = Tape::new();
        let ctx = model.batch_context(&mut tape);
        let opts = ForwardOptions {
            training: false,
            dropout: 0.0,
            run_main: true,
            run_aux: true,
            detach_aux_inputs: false,
            teacher_forcing: false,
        };
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut losses = Vec::new();
        for inst in &batch_ds.instances {
            let fwd = model.forward_instance(&mut tape, &ctx, inst, &opts, &mut rng)?;
            let main = fwd.main.as_ref().expect("main decoder ran");
            let aux = fwd.aux.as_ref().expect("auxiliary decoder ran");
            losses.push(coupled_loss_node(&mut tape, main, aux, &inst.gold_path, lambda));
        }
        let root = tape.mean_scalars(&losses);
        Ok((tape, root))
    };

    let (mut tape, root) = forward_loss(&model)?;
    let mut analytic = tape.backward(root)?;
    if let Some(name) = corrupt {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::config(format!("no gradient for parameter '{name}'")))?
            .clone();
        let bent: Vec<f64> = grad.values().iter().map(|v| v * 1.5 + 0.05).collect();
        analytic.insert(
            name.to_string(),
            crate::tensor::Tensor::from_vec(grad.shape().to_vec(), bent)?,
        );
    }

    let report = finite_diff_check(
        &model.params,
        &analytic,
        |params: &ParamStore| {
            let probe = model.with_params(params.clone());
            let (tape, root) = forward_loss(&probe)?;
            if let Some(op) = tape.poisoned() {
                return Err(Error::numerics(format!("non-finite value in op '{op}'")));
            }
            Ok(tape.scalar(root))
        },
        gc.step,
        gc.samples_per_param,
        config.seed,
    )?;
    let passed = report.passes(GRADCHECK_TOLERANCE);
    Ok(GradcheckOutcome {
        report,
        tolerance: GRADCHECK_TOLERANCE,
        passed,
        params_checked: model.params.len(),
    })
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RowMetrics {
    pub level_accuracy: Vec<f64>,
    pub level_macro_f1: Vec<f64>,
    pub mean_accuracy: f64,
    pub top_sec: Option<f64>,
    pub top_sec_con: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub lambda: f64,
    pub scheme: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RowMetrics>,
    pub mean: RowMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub data_seed: u64,
}

pub struct AblateArtifacts {
    pub dir: PathBuf,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
    pub table: AblationTable,
}

fn variant_config(base: &RunConfig, variant: &str, lambda: Option<f64>) -> RunConfig {
    let mut cfg = base.clone();
    cfg.ablation = Default::default();
    cfg.eval.scheme = Scheme::TopDown;
    match variant {
        "full" => {}
        "no_gcn" => cfg.ablation.no_gcn = true,
        "no_label_attention" => cfg.ablation.no_label_attention = true,
        "no_prev_pred" => cfg.ablation.no_prev_pred = true,
        "no_mutual_learning" => cfg.ablation.no_mutual_learning = true,
        "multitask_baseline" => {
            cfg.ablation.multitask_baseline = true;
            cfg.ablation.no_mutual_learning = true;
            cfg.eval.scheme = Scheme::Multitask;
        }
        "ensemble_eval" => {
            cfg.ablation.ensemble_eval = true;
            cfg.eval.scheme = Scheme::Ensemble;
        }
        other => panic!("unknown variant '{other}'"),
    }
    if let Some(l) = lambda {
        cfg.train.lambda = l;
    }
    cfg.normalized()
}

/// Key identifying the training work a row needs (evaluation scheme and the
/// ensemble flag do not affect training, so rows differing only there share
/// trained models).
fn train_cache_key(cfg: &RunConfig, seed: u64) -> String {
    let mut train_cfg = cfg.clone();
    train_cfg.seed = seed;
    train_cfg.eval = Default::default();
    train_cfg.ablation.ensemble_eval = false;
    train_cfg.hash()
}

/// Run the variant grid (and optionally the lambda sweep) over the seed list,
/// evaluating every row on the same test split with paired data.
pub fn run_ablation(config: &RunConfig) -> Result<AblationTable> {
    let (hierarchy, train_ds, valid_ds, test_ds) = load_data(config)?;
    let mut variants: Vec<(String, Option<f64>)> = [
        "full",
        "no_gcn",
        "no_label_attention",
        "no_prev_pred",
        "no_mutual_learning",
        "multitask_baseline",
        "ensemble_eval",
    ]
    .iter()
    .map(|v| (v.to_string(), None))
    .collect();
    if config.ablate.lambda_sweep {
        for l in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5] {
            variants.push(("full".to_string(), Some(l)));
        }
    }

    let mut trained: HashMap<String, Model> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, lambda) in &variants {
        let row_cfg = variant_config(config, variant, *lambda);
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let mut seeded = row_cfg.clone();
            seeded.seed = seed;
            let key = train_cache_key(&seeded, seed);
            if !trained.contains_key(&key) {
                let outcome =
                    training::train(&seeded, hierarchy.clone(), &train_ds, &valid_ds)?;
                trained.insert(key.clone(), outcome.checkpoint.model);
            }
            let model = &trained[&key];
            let (preds, golds, validity) = eval_dataset(model, &test_ds, seeded.eval.scheme)?;
            let _ = validity;
            per_seed.push(row_metrics(&preds, &golds, &hierarchy)?);
        }
        let mean = mean_metrics(&per_seed);
        rows.push(AblationRow {
            variant: match lambda {
                Some(l) => format!("full(lambda={l})"),
                None => variant.clone(),
            },
            lambda: row_cfg.train.lambda,
            scheme: row_cfg.eval.scheme.name().to_string(),
            config_hash: row_cfg.hash(),
            seeds: config.seeds.clone(),
            per_seed,
            mean,
        });
    }
    Ok(AblationTable { rows, data_seed: config.synthetic.seed })
}

pub fn run_ablate(config: &RunConfig) -> Result<AblateArtifacts> {
    let table = run_ablation(config)?;
    let dir = output_dir(config)?;
    write_config_echo(config, &dir)?;
    let json_path = dir.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)? + "\n")?;
    let text_path = dir.join("ablation.txt");
    std::fs::write(&text_path, render_table(&table))?;
    Ok(AblateArtifacts { dir, json_path, text_path, table })
}

fn row_metrics(
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    hierarchy: &LabelHierarchy,
) -> Result<RowMetrics> {
    use crate::metrics::{accuracy, macro_f1, top_sec, top_sec_con};
    let levels = hierarchy.num_levels();
    let mut level_accuracy = Vec::with_capacity(levels);
    let mut level_macro_f1 = Vec::with_capacity(levels);
    for m in 1..=levels {
        level_accuracy.push(accuracy(preds, golds, m)?);
        level_macro_f1.push(macro_f1(preds, golds, m, hierarchy.level_size(m))?);
    }
    Ok(RowMetrics {
        mean_accuracy: level_accuracy.iter().sum::<f64>() / levels as f64,
        top_sec: if levels >= 2 { Some(top_sec(preds, golds)?) } else { None },
        top_sec_con: if levels >= 3 { Some(top_sec_con(preds, golds)?) } else { None },
        level_accuracy,
        level_macro_f1,
    })
}

fn mean_metrics(per_seed: &[RowMetrics]) -> RowMetrics {
    let n = per_seed.len() as f64;
    let levels = per_seed[0].level_accuracy.len();
    let mean_over = |f: &dyn Fn(&RowMetrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    RowMetrics {
        level_accuracy: (0..levels)
            .map(|m| mean_over(&|r: &RowMetrics| r.level_accuracy[m]))
            .collect(),
        level_macro_f1: (0..levels)
            .map(|m| mean_over(&|r: &RowMetrics| r.level_macro_f1[m]))
            .collect(),
        mean_accuracy: mean_over(&|r: &RowMetrics| r.mean_accuracy),
        top_sec: per_seed[0]
            .top_sec
            .map(|_| mean_over(&|r: &RowMetrics| r.top_sec.unwrap())),
        top_sec_con: per_seed[0]
            .top_sec_con
            .map(|_| mean_over(&|r: &RowMetrics| r.top_sec_con.unwrap())),
    }
}

/// Aligned text rendering of the ablation table.
pub fn render_table(table: &AblationTable) -> String {
    let levels = table.rows.first().map(|r| r.mean.level_accuracy.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:<10} {:<12}", "variant", "scheme", "hash"));
    for m in 1..=levels {
        out.push_str(&format!(" {:>8} {:>8}", format!("L{m}-Acc"), format!("L{m}-F1")));
    }
    out.push_str(&format!(" {:>8} {:>8}\n", "TopSec", "TopSecC"));
    for row in &table.rows {
        out.push_str(&format!(
            "{:<24} {:<10} {:<12}",
            row.variant, row.scheme, row.config_hash
        ));
        for m in 0..levels {
            out.push_str(&format!(
                " {:>8.4} {:>8.4}",
                row.mean.level_accuracy[m], row.mean.level_macro_f1[m]
            ));
        }
        match row.mean.top_sec {
            Some(v) => out.push_str(&format!(" {v:>8.4}")),
            None => out.push_str(&format!(" {:>8}", "-")),
        }
        match row.mean.top_sec_con {
            Some(v) => out.push_str(&format!(" {v:>8.4}\n")),
            None => out.push_str(&format!(" {:>8}\n", "-")),
        }
    }
    out
}
