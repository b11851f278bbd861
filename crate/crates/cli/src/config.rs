//! Experiment configuration: one JSON document declaring the dataset,
//! the teacher/student pair, schedules, loss weights, and the sweep grid
//! (methods × seeds).
//!
//! Every hyperparameter has the published default (`α=1, β=2, γ=2,
//! λ=0.1, τ=4`, Nesterov momentum 0.9, weight decay 5e-4, decay factor
//! 0.1) and the desk-scale schedule, so a minimal config only names the
//! dataset, the two model specs, and the grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bickd_core::data::{DatasetSpec, SamplerSpec};
use bickd_core::losses::{LossWeights, Method};
use bickd_core::models::MlpSpec;
use bickd_core::trainer::TrainSchedule;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Optional resampling of the training split (few-shot / long-tail).
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
    pub teacher: MlpSpec,
    pub student: MlpSpec,
    #[serde(default)]
    pub teacher_schedule: TrainSchedule,
    #[serde(default)]
    pub student_schedule: TrainSchedule,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub methods: Vec<Method>,
    /// Per-run seeds, shared across methods so comparisons are paired.
    /// Each run overrides the student spec seed and the student schedule
    /// seed with its run seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config(
                "methods: at least one method is required".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config(
                "seeds: at least one seed is required".into(),
            ));
        }
        self.teacher
            .validate()
            .map_err(|e| CliError::Config(format!("teacher: {e}")))?;
        self.student
            .validate()
            .map_err(|e| CliError::Config(format!("student: {e}")))?;
        self.teacher_schedule
            .validate()
            .map_err(|e| CliError::Config(format!("teacher_schedule: {e}")))?;
        self.student_schedule
            .validate()
            .map_err(|e| CliError::Config(format!("student_schedule: {e}")))?;
        self.loss_weights
            .validate()
            .map_err(|e| CliError::Config(format!("loss_weights: {e}")))?;
        if let Some(sampler) = &self.sampler {
            sampler
                .validate()
                .map_err(|e| CliError::Config(format!("sampler: {e}")))?;
        }
        Ok(())
    }

    /// Student spec for one sweep cell: the run seed replaces the
    /// configured initialization seed.
    pub fn student_spec_for_seed(&self, seed: u64) -> MlpSpec {
        MlpSpec {
            seed,
            ..self.student.clone()
        }
    }

    /// Student schedule for one sweep cell: the run seed drives the
    /// batch shuffles, so compared methods see identical batches.
    pub fn student_schedule_for_seed(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            seed,
            ..self.student_schedule.clone()
        }
    }
}
