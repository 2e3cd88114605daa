//! Acceptance gate: one test per criterion, each printing a pass/fail line.
//!
//! Numeric criteria run at pinned tolerances; the two statistical criteria
//! (decoder agreement trend, consistency advantage) share one set of paired
//! multi-seed runs on the noisy synthetic corpus.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use labelseq::config::{ModelConfig, RunConfig, Scheme};
use labelseq::corpus::{generate_synthetic, Dataset, Instance, SyntheticSpec};
use labelseq::decoder::ensemble_predict;
use labelseq::harness::{eval_dataset, run_ablation, run_eval, run_gradcheck, run_train};
use labelseq::hierarchy::{build_adjacency, HierarchyDoc, LabelHierarchy};
use labelseq::model::Model;
use labelseq::params::Partition;
use labelseq::tensor::Tensor;
use labelseq::training::{loss_main_value, train, Trainer};

fn verdict(id: &str, pass: bool, detail: &str) {
    println!("[{}] {} - {}", if pass { "PASS" } else { "FAIL" }, id, detail);
    assert!(pass, "{id}: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn c01_gradient_fidelity() {
    let mut config = RunConfig::default();
    config.gradcheck.model = ModelConfig {
        layers: 1,
        token_dim: 16,
        heads: 2,
        ff_dim: 32,
        label_dim: 8,
        gcn_layers: 2,
        hidden_dim: 16,
        max_arg_len: 64,
        normalize_adjacency: false,
    };
    // Three-level synthetic hierarchy (4/3/2 branching).
    config.synthetic.branching = vec![4, 3, 2];
    config.synthetic.train = 64;
    config.synthetic.valid = 16;
    config.synthetic.test = 16;

    let start = Instant::now();
    let out = run_gradcheck(&config, None).expect("gradcheck runs");
    let elapsed = start.elapsed();

    // Every partition must contribute parameters to the checked model.
    let (hierarchy, train_ds, _, _) = labelseq::harness::load_data(&config).unwrap();
    let batch = Dataset { instances: train_ds.instances.iter().take(4).cloned().collect() };
    let vocab = labelseq::corpus::Vocab::build(&batch, 1).unwrap();
    let model = Model::build(
        config.gradcheck.model.clone(),
        Default::default(),
        hierarchy,
        vocab,
        config.seed,
    )
    .unwrap();
    for partition in [Partition::Encoder, Partition::MainDecoder, Partition::AuxDecoder] {
        assert!(
            !model.params.partition_names(&[partition]).is_empty(),
            "partition {partition:?} has parameters on the checked path"
        );
    }

    let pass = out.passed && elapsed.as_secs() < 60;
    verdict(
        "C1 gradient fidelity",
        pass,
        &format!(
            "max rel err {:.3e} (tol 1e-4) over {} coords, worst {}, {:.1?}",
            out.report.max_rel_err, out.report.coords_checked, out.report.worst_param, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: adjacency exactness
// ---------------------------------------------------------------------------

fn random_hierarchy(rng: &mut ChaCha8Rng) -> LabelHierarchy {
    let levels = rng.gen_range(1..=4);
    let mut names: Vec<Vec<String>> = Vec::new();
    for m in 0..levels {
        let size = rng.gen_range(1..=6);
        names.push((0..size).map(|i| format!("n{m}_{i}")).collect());
    }
    let mut edges = Vec::new();
    for m in 1..levels {
        let parents = names[m - 1].clone();
        for child in &names[m] {
            let p = rng.gen_range(0..parents.len());
            edges.push((child.clone(), parents[p].clone()));
            // Extra parents allowed at the deepest level only.
            if m == levels - 1 && parents.len() > 1 && rng.gen_bool(0.3) {
                let q = (p + 1 + rng.gen_range(0..parents.len() - 1)) % parents.len();
                edges.push((child.clone(), parents[q].clone()));
            }
        }
    }
    LabelHierarchy::from_doc(&HierarchyDoc { levels: names, edges }).expect("valid hierarchy")
}

#[test]
fn c02_adjacency_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..100 {
        let h = random_hierarchy(&mut rng);
        let adj = build_adjacency(&h);
        let n = h.num_nodes();
        let mut off_diag_ones = 0;
        for j in 0..n {
            assert_eq!(adj.at(j, j), 1, "unit diagonal");
            for k in 0..n {
                assert_eq!(adj.at(j, k), adj.at(k, j), "symmetry at ({j},{k})");
                if j != k {
                    let related = h.parents_of(j).contains(&k) || h.parents_of(k).contains(&j);
                    assert_eq!(
                        adj.at(j, k) == 1,
                        related,
                        "off-diagonal entry ({j},{k}) vs parent set"
                    );
                    off_diag_ones += adj.at(j, k) as usize;
                }
            }
        }
        assert_eq!(off_diag_ones, 2 * h.parent_pair_count());
    }
    let elapsed = start.elapsed();
    verdict(
        "C2 adjacency exactness",
        elapsed.as_secs_f64() < 5.0,
        &format!("100 random hierarchies verified in {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: distribution invariants
// ---------------------------------------------------------------------------

fn assert_distribution(values: &[f64], what: &str) {
    let sum: f64 = values.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-9, "{what} sums to {sum}");
    assert!(values.iter().all(|&v| v >= 0.0), "{what} has a negative entry");
}

#[test]
fn c03_distribution_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut passes = 0usize;
    let mut families = 0usize;
    while passes < 1000 {
        families += 1;
        let levels = rng.gen_range(1..=3);
        let branching: Vec<usize> = (0..levels).map(|_| rng.gen_range(1..=3)).collect();
        let spec = SyntheticSpec {
            branching,
            train: 16,
            valid: 4,
            test: 4,
            arg_len: (2, 6),
            filler_vocab: 10,
            seed: rng.gen(),
            ..Default::default()
        };
        let (hierarchy, train_ds, _, _) = generate_synthetic(&spec).unwrap();
        let vocab = labelseq::corpus::Vocab::build(&train_ds, 1).unwrap();
        let dims = [8usize, 12, 16];
        let cfg = ModelConfig {
            layers: rng.gen_range(1..=2),
            token_dim: dims[rng.gen_range(0..dims.len())],
            heads: 2,
            ff_dim: 16,
            label_dim: rng.gen_range(4..=10),
            gcn_layers: rng.gen_range(1..=2),
            hidden_dim: rng.gen_range(4..=12),
            max_arg_len: 16,
            normalize_adjacency: rng.gen_bool(0.5),
        };
        let gru_model = Model::build(
            cfg.clone(),
            Default::default(),
            hierarchy.clone(),
            vocab.clone(),
            rng.gen(),
        )
        .unwrap();
        let multitask_model = Model::build(
            cfg,
            labelseq::config::AblationFlags {
                multitask_baseline: true,
                no_mutual_learning: true,
                ..Default::default()
            },
            hierarchy,
            vocab,
            rng.gen(),
        )
        .unwrap();
        for inst in &train_ds.instances {
            let outs = gru_model.eval_instance(inst).unwrap();
            for alpha in &outs.alphas {
                assert_distribution(alpha.values(), "attention weights");
            }
            let main = outs.main.as_ref().unwrap();
            let aux = outs.aux.as_ref().unwrap();
            for d in main.dists.iter().chain(&aux.dists) {
                assert_distribution(d.values(), "decoder distribution");
            }
            let mixed = ensemble_predict(main, aux).unwrap();
            for d in &mixed.dists {
                assert_distribution(d.values(), "ensemble distribution");
            }
            let mt = multitask_model.eval_instance(inst).unwrap();
            for d in &mt.main.unwrap().dists {
                assert_distribution(d.values(), "multitask distribution");
            }
            passes += 1;
            if passes >= 1000 {
                break;
            }
        }
    }
    verdict(
        "C3 distribution invariants",
        true,
        &format!("{passes} forward passes over {families} random model families"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: parameter-partition discipline
// ---------------------------------------------------------------------------

fn bits_of(snapshot: &[(String, Tensor)]) -> Vec<(String, Vec<u64>)> {
    snapshot
        .iter()
        .map(|(name, t)| (name.clone(), t.values().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn c04_parameter_partition_discipline() {
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        layers: 1,
        token_dim: 16,
        heads: 2,
        ff_dim: 32,
        label_dim: 8,
        gcn_layers: 2,
        hidden_dim: 16,
        max_arg_len: 24,
        normalize_adjacency: false,
    };
    run.synthetic = SyntheticSpec {
        branching: vec![3, 2],
        train: 32,
        valid: 8,
        test: 8,
        ..Default::default()
    };
    let (hierarchy, train_ds, _, _) = generate_synthetic(&run.synthetic).unwrap();
    let mut trainer = Trainer::new(&run, hierarchy, &train_ds).unwrap();
    let batch: Vec<&Instance> = train_ds.instances.iter().take(8).collect();
    let update = trainer.compute_batch(&batch).unwrap();

    let aux_before = bits_of(&trainer.model.params.snapshot(&[Partition::AuxDecoder]));
    trainer.apply_main(&update).unwrap();
    let aux_after = bits_of(&trainer.model.params.snapshot(&[Partition::AuxDecoder]));
    let step1_clean = aux_before == aux_after;

    let main_before = bits_of(
        &trainer.model.params.snapshot(&[Partition::Encoder, Partition::MainDecoder]),
    );
    trainer.apply_aux(&update).unwrap();
    let main_after = bits_of(
        &trainer.model.params.snapshot(&[Partition::Encoder, Partition::MainDecoder]),
    );
    let step2_clean = main_before == main_after;

    let aux_moved = bits_of(&trainer.model.params.snapshot(&[Partition::AuxDecoder]));
    verdict(
        "C4 parameter-partition discipline",
        step1_clean && step2_clean && aux_moved != aux_before,
        &format!(
            "step 1 left auxiliary bits unchanged: {step1_clean}; step 2 left encoder+decoder bits unchanged: {step2_clean}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: loss identities
// ---------------------------------------------------------------------------

#[test]
fn c05_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_zero_gap = 0.0f64;
    let mut worst_equal_gap = 0.0f64;
    for _ in 0..200 {
        let levels = rng.gen_range(1..=4);
        let mut topdown = Vec::new();
        let mut bottomup = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..levels {
            let n = rng.gen_range(2..=6);
            let sample = |rng: &mut ChaCha8Rng| {
                let mut t = Tensor::zeros(vec![n]);
                t.fill_uniform(0.01, 1.0, rng);
                let s: f64 = t.values().iter().sum();
                for v in t.values_mut() {
                    *v /= s;
                }
                t
            };
            topdown.push(sample(&mut rng));
            bottomup.push(sample(&mut rng));
            gold.push(rng.gen_range(0..n));
        }
        // lambda = 0 reduces to the plain cross-entropy sum.
        let got = loss_main_value(&topdown, &bottomup, &gold, 0.0).unwrap();
        let expected: f64 = topdown
            .iter()
            .zip(&gold)
            .map(|(d, &g)| -d.values()[g].ln())
            .sum();
        worst_zero_gap = worst_zero_gap.max((got - expected).abs());

        // Forcing the decoders equal zeroes every divergence term.
        let lambda = rng.gen_range(0.1..2.5);
        let with_kl = loss_main_value(&topdown, &topdown, &gold, lambda).unwrap();
        let without = loss_main_value(&topdown, &topdown, &gold, 0.0).unwrap();
        worst_equal_gap = worst_equal_gap.max((with_kl - without).abs());
    }
    verdict(
        "C5 loss identities",
        worst_zero_gap <= 1e-12 && worst_equal_gap <= 1e-12,
        &format!(
            "lambda=0 CE gap {worst_zero_gap:.2e}, forced-equal KL residue {worst_equal_gap:.2e} (tol 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: synthetic learnability
// ---------------------------------------------------------------------------

#[test]
fn c06_synthetic_learnability() {
    let mut run = RunConfig::default();
    run.seed = 6;
    run.train.epochs = 30;
    run.train.patience = Some(3);
    run.synthetic = SyntheticSpec {
        branching: vec![4, 3, 2],
        train: 2000,
        valid: 500,
        test: 500,
        noise_rate: 0.0,
        ..Default::default()
    };
    let (hierarchy, train_ds, valid_ds, test_ds) = generate_synthetic(&run.synthetic).unwrap();
    let start = Instant::now();
    let outcome = train(&run, hierarchy, &train_ds, &valid_ds).unwrap();
    let (preds, golds, _) =
        eval_dataset(&outcome.checkpoint.model, &test_ds, Scheme::TopDown).unwrap();
    let elapsed = start.elapsed();
    let mut accs = Vec::new();
    for m in 1..=3 {
        accs.push(labelseq::metrics::accuracy(&preds, &golds, m).unwrap());
    }
    let all_pass = accs.iter().all(|&a| a >= 0.95);
    verdict(
        "C6 synthetic learnability",
        all_pass && elapsed.as_secs_f64() < 300.0,
        &format!(
            "test accuracy per level {:?} (>= 0.95 required), {} epochs, {:.1?}",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
            outcome.log.len(),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 7 and 8: shared paired runs on the noisy corpus
// ---------------------------------------------------------------------------

struct NoisySeedOutcome {
    seed: u64,
    kl_epoch1: f64,
    kl_final: f64,
    full_top_sec: f64,
    multitask_top_sec: f64,
}

fn noisy_base_config() -> RunConfig {
    let mut run = RunConfig::default();
    run.train.lambda = 1.0;
    run.train.epochs = 7;
    run.synthetic = SyntheticSpec {
        branching: vec![4, 3, 2],
        train: 2000,
        valid: 300,
        test: 300,
        noise_rate: 0.2,
        ..Default::default()
    };
    run
}

static NOISY_RUNS: OnceLock<Vec<NoisySeedOutcome>> = OnceLock::new();

fn noisy_runs() -> &'static Vec<NoisySeedOutcome> {
    NOISY_RUNS.get_or_init(|| {
        let base = noisy_base_config();
        let (hierarchy, train_ds, valid_ds, test_ds) =
            generate_synthetic(&base.synthetic).unwrap();
        let mut outcomes = Vec::new();
        for seed in [1u64, 2, 3, 4, 5] {
            let mut full = base.clone();
            full.seed = seed;
            let outcome = train(&full, hierarchy.clone(), &train_ds, &valid_ds).unwrap();
            let kl_epoch1 = outcome.log.first().unwrap().validation.decoder_agreement_kl
                .expect("mutual learning active");
            let kl_final = outcome.log.last().unwrap().validation.decoder_agreement_kl
                .expect("mutual learning active");
            let (preds, golds, _) =
                eval_dataset(&outcome.checkpoint.model, &test_ds, Scheme::TopDown).unwrap();
            let full_top_sec = labelseq::metrics::top_sec(&preds, &golds).unwrap();

            let mut multi = full.clone();
            multi.ablation.multitask_baseline = true;
            multi.ablation.no_mutual_learning = true;
            let outcome = train(&multi, hierarchy.clone(), &train_ds, &valid_ds).unwrap();
            let (preds, golds, _) =
                eval_dataset(&outcome.checkpoint.model, &test_ds, Scheme::Multitask).unwrap();
            let multitask_top_sec = labelseq::metrics::top_sec(&preds, &golds).unwrap();

            outcomes.push(NoisySeedOutcome {
                seed,
                kl_epoch1,
                kl_final,
                full_top_sec,
                multitask_top_sec,
            });
        }
        outcomes
    })
}

#[test]
fn c07_decoder_agreement_trend() {
    let runs = noisy_runs();
    let wins = runs.iter().filter(|r| r.kl_final < r.kl_epoch1).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.4} -> {:.4}", r.seed, r.kl_epoch1, r.kl_final))
        .collect();
    verdict(
        "C7 decoder-agreement trend",
        wins >= 4,
        &format!("final KL below epoch-1 KL for {wins}/5 seeds ({})", detail.join("; ")),
    );
}

#[test]
fn c08_consistency_advantage() {
    let runs = noisy_runs();
    let full: f64 = runs.iter().map(|r| r.full_top_sec).sum::<f64>() / runs.len() as f64;
    let multi: f64 =
        runs.iter().map(|r| r.multitask_top_sec).sum::<f64>() / runs.len() as f64;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.full_top_sec, r.multitask_top_sec))
        .collect();
    verdict(
        "C8 consistency advantage",
        full >= multi,
        &format!(
            "5-seed mean Top-Sec: sequence model {full:.4} vs multitask {multi:.4} (gap {:+.4}; {})",
            full - multi,
            per_seed.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: ablation harness completeness
// ---------------------------------------------------------------------------

#[test]
fn c09_ablation_harness_completeness() {
    let mut run = RunConfig::default();
    run.seeds = vec![1, 2];
    run.ablate.lambda_sweep = true;
    run.model = ModelConfig {
        layers: 1,
        token_dim: 16,
        heads: 2,
        ff_dim: 32,
        label_dim: 8,
        gcn_layers: 1,
        hidden_dim: 16,
        max_arg_len: 24,
        normalize_adjacency: false,
    };
    run.train.epochs = 2;
    run.train.batch_size = 16;
    run.synthetic = SyntheticSpec {
        branching: vec![3, 2, 2],
        train: 80,
        valid: 24,
        test: 24,
        noise_rate: 0.2,
        ..Default::default()
    };
    let table = run_ablation(&run).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    let expected_variants = [
        "full",
        "no_gcn",
        "no_label_attention",
        "no_prev_pred",
        "no_mutual_learning",
        "multitask_baseline",
        "ensemble_eval",
    ];
    let variants_present =
        expected_variants.iter().all(|v| names.contains(v)) && table.rows.len() == 13;
    let sweep_count = names.iter().filter(|n| n.starts_with("full(lambda=")).count();

    let hash_of = |name: &str| -> &str {
        &table.rows.iter().find(|r| r.variant == name).unwrap().config_hash
    };
    let lambda0_matches_no_ml = hash_of("full(lambda=0)") == hash_of("no_mutual_learning");
    verdict(
        "C9 ablation harness completeness",
        variants_present && sweep_count == 6 && lambda0_matches_no_ml,
        &format!(
            "{} rows ({} sweep points); lambda=0 and no_mutual_learning share config hash: {lambda0_matches_no_ml}",
            table.rows.len(),
            sweep_count
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: metric oracle equivalence
// ---------------------------------------------------------------------------

mod metric_oracle {
    //! Brute-force reimplementation of the metric suite, written against the
    //! definitions rather than the production code paths.

    pub fn accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>], m: usize) -> f64 {
        let mut hits = 0usize;
        for i in 0..preds.len() {
            if preds[i][m - 1] == golds[i][m - 1] {
                hits += 1;
            }
        }
        hits as f64 / preds.len() as f64
    }

    pub fn label_f1(preds: &[Vec<usize>], golds: &[Vec<usize>], m: usize, label: usize) -> f64 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for i in 0..preds.len() {
            let p = preds[i][m - 1] == label;
            let g = golds[i][m - 1] == label;
            if p && g {
                tp += 1.0;
            }
            if p && !g {
                fp += 1.0;
            }
            if !p && g {
                fn_ += 1.0;
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    }

    pub fn macro_f1(preds: &[Vec<usize>], golds: &[Vec<usize>], m: usize, labels: usize) -> f64 {
        (0..labels).map(|l| label_f1(preds, golds, m, l)).sum::<f64>() / labels as f64
    }

    pub fn correct_prefix(preds: &[Vec<usize>], golds: &[Vec<usize>], through: usize) -> f64 {
        let mut hits = 0usize;
        'outer: for i in 0..preds.len() {
            for m in 0..through {
                if preds[i][m] != golds[i][m] {
                    continue 'outer;
                }
            }
            hits += 1;
        }
        hits as f64 / preds.len() as f64
    }
}

#[test]
fn c10_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_f1_gap = 0.0f64;
    for _ in 0..50 {
        let levels = rng.gen_range(2..=4);
        let sizes: Vec<usize> = (0..levels).map(|_| rng.gen_range(2..=6)).collect();
        let n = rng.gen_range(1..=40);
        let random_paths = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..n)
                .map(|_| sizes.iter().map(|&s| rng.gen_range(0..s)).collect())
                .collect()
        };
        let golds = random_paths(&mut rng);
        let preds = random_paths(&mut rng);

        for m in 1..=levels {
            let got = labelseq::metrics::accuracy(&preds, &golds, m).unwrap();
            let want = metric_oracle::accuracy(&preds, &golds, m);
            assert_eq!(got, want, "accuracy level {m}");

            let got = labelseq::metrics::macro_f1(&preds, &golds, m, sizes[m - 1]).unwrap();
            let want = metric_oracle::macro_f1(&preds, &golds, m, sizes[m - 1]);
            worst_f1_gap = worst_f1_gap.max((got - want).abs());
            assert!((got - want).abs() <= 1e-12, "macro f1 level {m}");

            let table =
                labelseq::metrics::labelwise_f1(&preds, &golds, m, sizes[m - 1]).unwrap();
            for score in &table {
                let want = metric_oracle::label_f1(&preds, &golds, m, score.label_index);
                worst_f1_gap = worst_f1_gap.max((score.f1 - want).abs());
                assert!((score.f1 - want).abs() <= 1e-12);
            }
        }
        let got = labelseq::metrics::top_sec(&preds, &golds).unwrap();
        assert_eq!(got, metric_oracle::correct_prefix(&preds, &golds, 2), "top-sec");
        if levels >= 3 {
            let got = labelseq::metrics::top_sec_con(&preds, &golds).unwrap();
            assert_eq!(got, metric_oracle::correct_prefix(&preds, &golds, levels));
        }
    }
    verdict(
        "C10 metric oracle equivalence",
        true,
        &format!("50 random prediction sets; rates exact, worst F1 gap {worst_f1_gap:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: determinism
// ---------------------------------------------------------------------------

#[test]
fn c11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunConfig::default();
    run.seed = 11;
    run.out_root = dir.path().join("runs").to_string_lossy().to_string();
    run.model = ModelConfig {
        layers: 1,
        token_dim: 16,
        heads: 2,
        ff_dim: 32,
        label_dim: 8,
        gcn_layers: 1,
        hidden_dim: 16,
        max_arg_len: 24,
        normalize_adjacency: false,
    };
    run.train.epochs = 3;
    run.train.batch_size = 16;
    run.synthetic = SyntheticSpec {
        branching: vec![3, 2],
        train: 120,
        valid: 40,
        test: 40,
        ..Default::default()
    };

    let mut artifacts: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = Vec::new();
    for _ in 0..2 {
        let trained = run_train(&run).unwrap();
        let evaluated = run_eval(&run, &trained.checkpoint_path).unwrap();
        artifacts.push((
            std::fs::read(&trained.metrics_path).unwrap(),
            std::fs::read(&evaluated.report_path).unwrap(),
            std::fs::read(&trained.checkpoint_path).unwrap(),
        ));
        std::fs::remove_dir_all(&trained.dir).unwrap();
    }
    let metrics_match = artifacts[0].0 == artifacts[1].0;
    let reports_match = artifacts[0].1 == artifacts[1].1;
    let checkpoints_match = artifacts[0].2 == artifacts[1].2;
    verdict(
        "C11 determinism",
        metrics_match && reports_match && checkpoints_match,
        &format!(
            "byte-identical across two runs: metrics {metrics_match}, report {reports_match}, checkpoint {checkpoints_match}"
        ),
    );
}
