//! Posterior sampling by random-walk Metropolis and parameter estimation by
//! ensemble Kalman inversion.

pub mod diagnostics;
pub mod eki;
pub mod mcmc;

use thiserror::Error;

use crate::objective::ObjectiveError;
use crate::priors::PriorError;

pub use diagnostics::{error_norm, estimate_posterior_pdf, Histogram};
pub use eki::{eki_update, eki_update_with, run_eki, EkiConfig, EnsembleRecord, InitialStateMode, IterationRecord};
pub use mcmc::{rwm_step, run_mcmc, sample_rwm, Chain, ChainLink, Energy, McmcConfig, RwmPoint};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every ensemble member diverged at iteration {0}")]
    AllDiverged(usize),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("no retained samples")]
    EmptySamples,
    #[error("histogram needs at least one bin")]
    Bins,
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}
