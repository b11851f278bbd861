//! `bickd` — train teachers, distill students, sweep methods × seeds,
//! inspect probability-space geometry, and verify gradients.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bickd_cli::config::ExperimentConfig;
use bickd_cli::runner::{materialize_data, pretrain_teacher, run_cell, run_sweep, summary_csv};
use bickd_cli::CliError;
use bickd_core::data::{Dataset, DatasetSpec};
use bickd_core::geometry::orthogonality_report;
use bickd_core::gradcheck::{self, GRADCHECK_TOLERANCE};
use bickd_core::losses::{Method, PredictionBatch};
use bickd_core::models::ModelParams;
use bickd_core::report::EvalRecord;

/// Default seed of the `gradcheck` subcommand's randomized suite.
const GRADCHECK_SEED: u64 = 0xB1C0;

#[derive(Parser)]
#[command(
    name = "bickd",
    version,
    about = "Bilateral contrastive knowledge distillation at desk scale"
)]
struct Cli {
    /// Number of parallel independent runs in a sweep.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Format of results printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher on the configured dataset and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill one (method, seed) cell from a pretrained teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint produced by `pretrain`.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
        /// Output directory for report.csv/report.json/student.ckpt.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full methods × seeds sweep and aggregate summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's probability-space geometry on a dataset.
    Geometry {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset spec JSON (or a full experiment config; its eval split is used).
        #[arg(long)]
        data: PathBuf,
        /// Output JSON path for the geometry report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; nonzero exit above 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_eval(format: Format, name: &str, eval: &EvalRecord) {
    match format {
        Format::Csv => {
            println!("model,top1,top5,offdiag_cos_mean,within_class_cos_mean");
            println!(
                "{name},{},{},{},{}",
                eval.top1,
                eval.top5,
                eval.geometry
                    .offdiag_cos_mean
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                eval.geometry.within_class_cos_mean
            );
        }
        Format::Json => {
            let doc = serde_json::json!({
                "model": name,
                "top1": eval.top1,
                "top5": eval.top5,
                "offdiag_cos_mean": eval.geometry.offdiag_cos_mean,
                "within_class_cos_mean": eval.geometry.within_class_cos_mean,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("serializable")
            );
        }
    }
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    name.parse::<Method>().map_err(CliError::Config)
}

/// `--data` accepts either a bare dataset spec or a full experiment
/// config; the evaluation split is preferred when present.
fn load_geometry_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec = match serde_json::from_str::<DatasetSpec>(&text) {
        Ok(spec) => spec,
        Err(spec_err) => match serde_json::from_str::<ExperimentConfig>(&text) {
            Ok(config) => config.dataset,
            Err(_) => {
                return Err(CliError::Config(format!(
                    "{} is neither a dataset spec nor an experiment config: {spec_err}",
                    path.display()
                )))
            }
        },
    };
    let (train, eval) = spec
        .load()
        .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    Ok(eval.unwrap_or(train))
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let data = materialize_data(&config)?;
            let (teacher, report) = pretrain_teacher(&config, &data.teacher_train, &data.eval)?;
            teacher
                .save(&out)
                .map_err(|e| CliError::Run(format!("cannot save checkpoint: {e}")))?;
            let final_eval = report
                .final_epoch()
                .and_then(|e| e.eval.as_ref())
                .or(report.init_eval.as_ref())
                .expect("teacher training evaluates");
            print_eval(cli.format, "teacher", final_eval);
            Ok(ExitCode::SUCCESS)
        }
        Command::Distill {
            config,
            teacher,
            method,
            seed,
            out,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let method = parse_method(&method)?;
            let teacher = ModelParams::load(&teacher)
                .map_err(|e| CliError::Run(format!("teacher checkpoint: {e}")))?;
            let data = materialize_data(&config)?;
            let outcome = run_cell(
                &config,
                &teacher.to_checkpoint(),
                &data.transfer,
                &data.eval,
                method,
                seed,
                &out,
            )?;
            let final_eval = outcome
                .report
                .final_epoch()
                .and_then(|e| e.eval.as_ref())
                .or(outcome.report.init_eval.as_ref())
                .expect("distillation evaluates");
            print_eval(cli.format, method.as_str(), final_eval);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let out = out.or_else(|| config.output_dir.clone()).ok_or_else(|| {
                CliError::Config("output_dir: pass --out or set output_dir in the config".into())
            })?;
            let result = run_sweep(&config, &out, cli.threads)?;
            match cli.format {
                Format::Csv => print!("{}", summary_csv(&result.summary.methods)),
                Format::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&result.summary).expect("serializable")
                ),
            }
            if result.summary.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &result.summary.failures {
                    eprintln!("failed cell {} seed {}: {}", f.method, f.seed, f.error);
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Geometry { ckpt, data, out } => {
            let model =
                ModelParams::load(&ckpt).map_err(|e| CliError::Run(format!("checkpoint: {e}")))?;
            let ds = load_geometry_dataset(&data)?;
            let logits = model
                .forward(&ds.features_tensor())
                .map_err(|e| CliError::Run(format!("forward pass: {e}")))?
                .detach();
            let preds = PredictionBatch::from_logits(&logits, ds.labels(), 1.0)
                .map_err(|e| CliError::Run(format!("predictions: {e}")))?;
            let stats = orthogonality_report(&preds);
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&stats).expect("serializable"),
            )
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", out.display())))?;
            match cli.format {
                Format::Csv => {
                    println!("offdiag_cos_mean,offdiag_cos_max,within_class_cos_mean,accuracy_std");
                    println!(
                        "{},{},{},{}",
                        stats
                            .offdiag_cos_mean
                            .map(|v| v.to_string())
                            .unwrap_or_default(),
                        stats
                            .offdiag_cos_max
                            .map(|v| v.to_string())
                            .unwrap_or_default(),
                        stats.within_class_cos_mean,
                        stats.accuracy_std
                    );
                }
                Format::Json => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&stats).expect("serializable")
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { trials } => {
            let report = gradcheck::run(trials, GRADCHECK_SEED);
            match cli.format {
                Format::Csv => {
                    println!("check,max_rel_err");
                    for c in &report.checks {
                        println!("{},{:e}", c.name, c.max_rel_err);
                    }
                }
                Format::Json => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&report).expect("serializable")
                    );
                }
            }
            println!(
                "max relative error {:e} over {} trials (tolerance {:e}), worst check: {}",
                report.max_rel_err, report.trials, GRADCHECK_TOLERANCE, report.worst_check
            );
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check FAILED");
                Ok(ExitCode::from(1))
            }
        }
    }
}
