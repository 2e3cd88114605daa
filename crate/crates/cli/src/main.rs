//! Batch command surface: corpus generation, training, evaluation,
//! prediction, gradient verification, and the ablation sweep. One JSON config
//! document drives every command; `--set key.path=value` overrides single
//! fields, and outputs land under `<out_root>/<config-hash>/`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use labelseq::config::RunConfig;
use labelseq::harness;

#[derive(Parser)]
#[command(
    name = "labelseq",
    about = "Hierarchical label-sequence classification toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the JSON config document. Omit to run on built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set train.lambda=0.5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> labelseq::Result<RunConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| {
                labelseq::Error::config(format!("cannot read config '{}': {e}", path.display()))
            })?,
            None => "{}".to_string(),
        };
        RunConfig::from_json_with_overrides(&text, &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus files (hierarchy + three splits).
    Synth(ConfigArgs),
    /// Train a model; writes model.ckpt and metrics.jsonl.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test split; writes report.json.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict label paths for a JSONL input; writes predictions.jsonl.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corrupt one parameter's gradient first (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Run the variant grid (and optional lambda sweep) over the seed list.
    Ablate(ConfigArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cli: Cli) -> labelseq::Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let config = args.load()?;
            let out = harness::run_synth(&config)?;
            println!(
                "wrote hierarchy ({} nodes, {} parent pairs, {} edges counting self-loops)",
                out.hierarchy_nodes, out.parent_pairs, out.edges_with_self_loops
            );
            let (train, valid, test) = out.split_sizes;
            println!("splits: train={train} valid={valid} test={test}");
            println!("output: {}", out.dir.display());
        }
        Command::Train(args) => {
            let config = args.load()?;
            let out = harness::run_train(&config)?;
            let last = out.log.last().expect("nonempty log");
            println!(
                "trained {} epochs; best epoch {} (validation mean accuracy {:.4})",
                out.log.len(),
                out.best_epoch,
                out.log
                    .iter()
                    .find(|m| m.epoch == out.best_epoch)
                    .unwrap_or(last)
                    .validation
                    .mean_accuracy
            );
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("metrics:    {}", out.metrics_path.display());
        }
        Command::Eval { config, checkpoint } => {
            let config = config.load()?;
            let out = harness::run_eval(&config, &checkpoint)?;
            println!("scheme: {}", out.report.scheme);
            for level in &out.report.levels {
                println!(
                    "level {}: accuracy {:.4}  macro-F1 {:.4}",
                    level.level, level.accuracy, level.macro_f1
                );
            }
            if let Some(v) = out.report.top_sec {
                println!("top-sec: {v:.4}");
            }
            if let Some(v) = out.report.top_sec_con {
                println!("top-sec-con: {v:.4}");
            }
            println!("path validity: {:.4}", out.report.path_validity_rate);
            println!("report: {}", out.report_path.display());
        }
        Command::Predict { config, checkpoint, input } => {
            let config = config.load()?;
            let out = harness::run_predict(&config, &checkpoint, &input)?;
            println!("predicted {} instances", out.lines);
            println!("dump: {}", out.dump_path.display());
        }
        Command::Gradcheck { config, corrupt } => {
            let config = config.load()?;
            let out = harness::run_gradcheck(&config, corrupt.as_deref())?;
            println!(
                "checked {} coordinates across {} parameters",
                out.report.coords_checked, out.params_checked
            );
            println!(
                "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                out.report.max_rel_err,
                out.report.worst_param,
                out.report.worst_index,
                out.report.worst_analytic,
                out.report.worst_numeric
            );
            if out.passed {
                println!("gradcheck PASS (tolerance {:.0e})", out.tolerance);
            } else {
                println!("gradcheck FAIL (tolerance {:.0e})", out.tolerance);
                return Err(labelseq::Error::Training(format!(
                    "gradient check failed: max relative error {:.3e} at {}",
                    out.report.max_rel_err, out.report.worst_param
                )));
            }
        }
        Command::Ablate(args) => {
            let config = args.load()?;
            let out = harness::run_ablate(&config)?;
            print!("{}", harness::render_table(&out.table));
            println!("rows: {}", out.table.rows.len());
            println!("json: {}", out.json_path.display());
            println!("text: {}", out.text_path.display());
        }
    }
    Ok(())
}
