//! Experiment runner library behind the `bickd` binary: config parsing,
//! sweep orchestration, and summary aggregation.

pub mod config;
pub mod runner;

use thiserror::Error;

/// CLI-level failure classes, mapped onto exit codes:
/// 0 success, 1 run failure, 2 configuration error.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run error: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}
