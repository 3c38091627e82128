//! Experiment orchestration behind the command-line interface.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;
pub mod validate;

use thiserror::Error;

use crate::calibrate::CalibrationError;
use crate::dynamics::DynamicsError;
use crate::objective::ObjectiveError;
use crate::statistics::StatsError;

pub use commands::{rerun, run_command, Command, Outcome};
pub use config::{ExperimentConfig, Profile, WarmStart};
pub use output::{RunManifest, SeedBook};
pub use validate::{run_validation, Check, ValidationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{0} validation check(s) failed")]
    Validation(usize),
}

impl HarnessError {
    fn dynamics(&self) -> Option<&DynamicsError> {
        match self {
            HarnessError::Dynamics(e) => Some(e),
            HarnessError::Stats(StatsError::Dynamics(e)) => Some(e),
            HarnessError::Objective(ObjectiveError::Dynamics(e)) => Some(e),
            HarnessError::Calibration(CalibrationError::Objective(ObjectiveError::Dynamics(e))) => Some(e),
            _ => None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if let Some(e) = self.dynamics() {
            return match e {
                DynamicsError::BlowUp { .. } => EXIT_BLOW_UP,
                _ => EXIT_CONFIG,
            };
        }
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Calibration(CalibrationError::Config(_)) => EXIT_CONFIG,
            HarnessError::Calibration(CalibrationError::AllDiverged(_)) => EXIT_BLOW_UP,
            HarnessError::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_OTHER,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Params;

    #[test]
    fn exit_codes() {
        let blow = DynamicsError::BlowUp {
            step: 1,
            time: 0.001,
            params: Params::reference(),
        };
        assert_eq!(HarnessError::Stats(StatsError::Dynamics(blow)).exit_code(), EXIT_BLOW_UP);
        assert_eq!(HarnessError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(HarnessError::Validation(1).exit_code(), EXIT_VALIDATION);
        assert_eq!(HarnessError::Io(std::io::Error::other("x")).exit_code(), EXIT_OTHER);
    }
}
