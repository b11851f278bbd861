//! Sweep orchestration: teacher pretraining, parallel (method × seed)
//! distillation runs, per-run reports on disk, and the aggregated
//! summary table.
//!
//! Cells are independent; workers share only the immutable datasets and
//! the frozen teacher checkpoint, and each cell writes to its own
//! subdirectory. Output ordering follows the config's method and seed
//! order regardless of thread scheduling, so re-running a config
//! reproduces byte-identical summaries.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use bickd_core::data::{subsample, Dataset};
use bickd_core::losses::Method;
use bickd_core::models::{Checkpoint, ModelParams};
use bickd_core::report::TrainReport;
use bickd_core::trainer::{distill, train_teacher};

use crate::config::ExperimentConfig;
use crate::CliError;

/// One completed (method, seed) cell.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub error: String,
}

/// Aggregates of one method over its successful seeds (final-epoch
/// evaluation metrics; std is the population standard deviation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
    pub offdiag_cos_mean: Option<f64>,
    pub within_class_cos_mean: f64,
    pub seeds: Vec<u64>,
    pub per_seed_top1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<CellFailure>,
}

pub struct SweepResult {
    pub outcomes: Vec<RunOutcome>,
    pub summary: SweepSummary,
    pub teacher_report: TrainReport,
}

/// The materialized splits of one experiment. The teacher pretrains on
/// the full training split; the sampler (few-shot / long-tail) shapes
/// only the *transfer* set that distillation runs on, mirroring the
/// usual protocol where the teacher has seen the complete data.
pub struct DataBundle {
    pub teacher_train: Dataset,
    pub transfer: Dataset,
    pub eval: Dataset,
}

pub fn materialize_data(config: &ExperimentConfig) -> Result<DataBundle, CliError> {
    let (train, eval) = config
        .dataset
        .load()
        .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let transfer = match &config.sampler {
        Some(s) => subsample(&train, s).map_err(|e| CliError::Config(format!("sampler: {e}")))?,
        None => train.clone(),
    };
    let eval = eval.unwrap_or_else(|| transfer.clone());
    Ok(DataBundle {
        teacher_train: train,
        transfer,
        eval,
    })
}

/// Pretrains the teacher on the full training split.
pub fn pretrain_teacher(
    config: &ExperimentConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<(ModelParams, TrainReport), CliError> {
    train_teacher(&config.teacher, train, Some(eval), &config.teacher_schedule)
        .map_err(|e| CliError::Run(format!("teacher pretraining failed: {e}")))
}

fn write_report(dir: &Path, report: &TrainReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", dir.display())))?;
    report
        .save_csv(&dir.join("report.csv"))
        .and_then(|_| report.save_json(&dir.join("report.json")))
        .map_err(|e| CliError::Run(format!("cannot write report in {}: {e}", dir.display())))
}

/// Runs one distillation cell and writes `report.csv`, `report.json`
/// and `student.ckpt.json` under `dir`.
pub fn run_cell(
    config: &ExperimentConfig,
    teacher_ck: &Checkpoint,
    train: &Dataset,
    eval: &Dataset,
    method: Method,
    seed: u64,
    dir: &Path,
) -> Result<RunOutcome, CliError> {
    let teacher = ModelParams::from_checkpoint(teacher_ck)
        .map_err(|e| CliError::Run(format!("teacher checkpoint: {e}")))?;
    let spec = config.student_spec_for_seed(seed);
    let schedule = config.student_schedule_for_seed(seed);
    let (student, report) = distill(
        &teacher,
        &spec,
        train,
        Some(eval),
        &schedule,
        &config.loss_weights,
        method,
    )
    .map_err(|e| CliError::Run(format!("{method} seed {seed}: {e}")))?;
    write_report(dir, &report)?;
    student
        .save(&dir.join("student.ckpt.json"))
        .map_err(|e| CliError::Run(format!("cannot save student checkpoint: {e}")))?;
    Ok(RunOutcome {
        method,
        seed,
        report,
    })
}

fn cell_dir(out_dir: &Path, method: Method, seed: u64) -> PathBuf {
    out_dir.join(method.as_str()).join(format!("seed_{seed}"))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn summarize(config: &ExperimentConfig, outcomes: &[RunOutcome]) -> Vec<MethodSummary> {
    let mut summaries = Vec::new();
    for &method in &config.methods {
        let runs: Vec<&RunOutcome> = config
            .seeds
            .iter()
            .filter_map(|&s| outcomes.iter().find(|o| o.method == method && o.seed == s))
            .collect();
        if runs.is_empty() {
            continue;
        }
        // zero-epoch schedules fall back to the initialization metrics
        let finals: Vec<_> = runs
            .iter()
            .map(|o| {
                o.report
                    .final_epoch()
                    .and_then(|e| e.eval.as_ref())
                    .or(o.report.init_eval.as_ref())
                    .expect("sweep runs always evaluate")
            })
            .collect();
        let top1: Vec<f64> = finals.iter().map(|e| e.top1).collect();
        let top5: Vec<f64> = finals.iter().map(|e| e.top5).collect();
        let offdiag: Vec<f64> = finals
            .iter()
            .filter_map(|e| e.geometry.offdiag_cos_mean)
            .collect();
        let within: Vec<f64> = finals
            .iter()
            .map(|e| e.geometry.within_class_cos_mean)
            .collect();
        summaries.push(MethodSummary {
            method: method.to_string(),
            mean_top1: mean(&top1),
            std_top1: population_std(&top1),
            mean_top5: mean(&top5),
            offdiag_cos_mean: if offdiag.is_empty() {
                None
            } else {
                Some(mean(&offdiag))
            },
            within_class_cos_mean: mean(&within),
            seeds: runs.iter().map(|o| o.seed).collect(),
            per_seed_top1: top1,
        });
    }
    summaries
}

pub const SUMMARY_CSV_HEADER: &str =
    "method,mean_top1,std_top1,mean_top5,offdiag_cos_mean,within_class_cos_mean";

pub fn summary_csv(summaries: &[MethodSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.method,
            s.mean_top1,
            s.std_top1,
            s.mean_top5,
            s.offdiag_cos_mean
                .map(|v| v.to_string())
                .unwrap_or_default(),
            s.within_class_cos_mean,
        ));
    }
    out
}

/// The full sweep: pretrain the teacher once, run every (method, seed)
/// cell (in parallel up to `threads`), and write per-run reports plus
/// `summary.csv` / `summary.json` under `out_dir`. Failing cells are
/// recorded and the sweep continues.
pub fn run_sweep(
    config: &ExperimentConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<SweepResult, CliError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", out_dir.display())))?;
    let data = materialize_data(config)?;
    let (train, eval) = (&data.transfer, &data.eval);

    let (teacher, teacher_report) = pretrain_teacher(config, &data.teacher_train, eval)?;
    let teacher_ck = teacher.to_checkpoint();
    teacher
        .save(&out_dir.join("teacher.ckpt.json"))
        .map_err(|e| CliError::Run(format!("cannot save teacher checkpoint: {e}")))?;
    write_report(&out_dir.join("teacher"), &teacher_report)?;

    let cells: Vec<(Method, u64)> = config
        .methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let slots: Vec<Mutex<Option<Result<RunOutcome, CellFailure>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = threads.max(1).min(cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (method, seed) = cells[i];
                let dir = cell_dir(out_dir, method, seed);
                let outcome = run_cell(config, &teacher_ck, train, eval, method, seed, &dir)
                    .map_err(|e| CellFailure {
                        method: method.to_string(),
                        seed,
                        error: e.to_string(),
                    });
                *slots[i].lock().expect("no poisoned cell") = Some(outcome);
            });
        }
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for slot in slots {
        match slot
            .into_inner()
            .expect("no poisoned cell")
            .expect("every cell ran")
        {
            Ok(o) => outcomes.push(o),
            Err(f) => failures.push(f),
        }
    }

    let summary = SweepSummary {
        methods: summarize(config, &outcomes),
        failures,
    };
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&summary.methods))
        .map_err(|e| CliError::Run(format!("cannot write summary.csv: {e}")))?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::Run(format!("cannot write summary.json: {e}")))?;

    Ok(SweepResult {
        outcomes,
        summary,
        teacher_report,
    })
}
