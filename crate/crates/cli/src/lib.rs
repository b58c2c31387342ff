//! Command-line front end for the coded federated learning simulator:
//! configuration, the `plan`, `train`, `histogram` and `sweep` commands,
//! and CSV/JSON output with reproducibility manifests.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use cfl_core::experiment::ExperimentError;
use cfl_core::planner::PlanError;
use cfl_core::SimError;
use thiserror::Error;

pub use commands::{run_histogram, run_plan, run_sweep, run_train};
pub use config::{ExperimentConfig, Mode, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("planner infeasible: {0}")]
    Infeasible(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Divergence(_) => 4,
            Self::Io { .. } | Self::Other(_) => 1,
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Infeasible { .. } | PlanError::NonMonotone { .. } => Self::Infeasible(e.to_string()),
            PlanError::NoData | PlanError::InvalidTolerance(_) | PlanError::InvalidDelta(_) => {
                Self::Config(e.to_string())
            }
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        if e.is_divergence() {
            Self::Divergence(e.to_string())
        } else if matches!(e, SimError::Config(_)) {
            Self::Config(e.to_string())
        } else {
            Self::Other(e.to_string())
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Plan(e) => e.into(),
            ExperimentError::Sim(e) => e.into(),
            ExperimentError::Invalid(msg) => Self::Config(msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfl_core::TrainError;

    #[test]
    fn exit_codes_are_distinct() {
        let infeasible: CliError = PlanError::Infeasible {
            required: 1.0,
            reachable: 0.0,
            deadline: 1.0,
            capacity: 0,
        }
        .into();
        let diverged: CliError = SimError::Train(TrainError::Diverged { epoch: 3, nmse: 1e7 }).into();
        let config: CliError = SimError::Config("bad".into()).into();
        assert_eq!(infeasible.exit_code(), 3);
        assert_eq!(diverged.exit_code(), 4);
        assert_eq!(config.exit_code(), 2);
        assert_eq!(CliError::Other("x".into()).exit_code(), 1);
    }
}
