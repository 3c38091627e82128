//! Noise models, weighted least-squares misfits and the posterior potential.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, FastState, IntegratorConfig, ModelState, Params};
use crate::priors::PriorSet;
use crate::statistics::{FastModel, ForwardModel, FullModel, MomentLayout};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("noise level must be positive and finite, got {0}")]
    NoiseLevel(f64),
    #[error("entry {index} has non-positive noise variance {value}")]
    ZeroVariance { index: usize, value: f64 },
    #[error("accumulation window must be positive, got {0}")]
    Window(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Diagonal misfit covariance `r^2 * var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    r: f64,
    variances: Vec<f64>,
    diag: Vec<f64>,
}

impl NoiseModel {
    pub fn new(r: f64, variances: Vec<f64>) -> Result<Self, ObjectiveError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(ObjectiveError::NoiseLevel(r));
        }
        if let Some((index, &value)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(ObjectiveError::ZeroVariance { index, value });
        }
        let diag = variances.iter().map(|v| r * r * v).collect();
        Ok(Self { r, variances, diag })
    }

    /// Same variances at a different noise level.
    pub fn with_level(&self, r: f64) -> Result<Self, ObjectiveError> {
        Self::new(r, self.variances.clone())
    }

    pub fn level(&self) -> f64 {
        self.r
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// `1/2 sum_i (sim_i - target_i)^2 / diag_i`.
pub fn weighted_misfit(sim: &[f64], target: &[f64], noise: &NoiseModel) -> Result<f64, ObjectiveError> {
    for got in [sim.len(), target.len()] {
        if got != noise.len() {
            return Err(ObjectiveError::Length {
                expected: noise.len(),
                got,
            });
        }
    }
    Ok(0.5
        * sim
            .iter()
            .zip(target)
            .zip(noise.diag())
            .map(|((s, t), d)| (s - t) * (s - t) / d)
            .sum::<f64>())
}

/// Target statistics together with the forward model that must reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationTarget<M> {
    pub model: M,
    pub mean: Vec<f64>,
    pub noise: NoiseModel,
    /// Accumulation window in days.
    pub window: f64,
}

impl<M: ForwardModel> CalibrationTarget<M> {
    pub fn new(model: M, mean: Vec<f64>, noise: NoiseModel, window: f64) -> Result<Self, ObjectiveError> {
        let len = model.layout().len();
        for got in [mean.len(), noise.len()] {
            if got != len {
                return Err(ObjectiveError::Length { expected: len, got });
            }
        }
        if !(window > 0.0 && window.is_finite()) {
            return Err(ObjectiveError::Window(window));
        }
        Ok(Self {
            model,
            mean,
            noise,
            window,
        })
    }

    pub fn layout(&self) -> MomentLayout {
        self.model.layout()
    }

    /// Same target with the noise rescaled to level `r`.
    pub fn with_level(&self, r: f64) -> Result<Self, ObjectiveError>
    where
        M: Clone,
    {
        Ok(Self {
            noise: self.noise.with_level(r)?,
            ..self.clone()
        })
    }
}

/// Misfit of one forward evaluation. A trajectory that left the finite range
/// is kept apart from a merely large misfit.
#[derive(Debug, Clone, PartialEq)]
pub enum Misfit {
    Finite(f64),
    Diverged { step: u64, time: f64 },
}

impl Misfit {
    /// The misfit as a number, with divergence mapped to `+inf`.
    pub fn value(&self) -> f64 {
        match self {
            Misfit::Finite(v) => *v,
            Misfit::Diverged { .. } => f64::INFINITY,
        }
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, Misfit::Diverged { .. })
    }
}

/// Result of running the forward model over one accumulation window.
#[derive(Debug, Clone)]
pub struct ForwardRun<S> {
    /// Time-averaged moments, or `None` if the trajectory diverged.
    pub moments: Option<Vec<f64>>,
    pub misfit: Misfit,
    /// End of the trajectory; the initial state if it diverged.
    pub final_state: S,
}

/// Run the target's forward model from `init` at `params` and score it.
pub fn evaluate<M: ForwardModel>(
    params: &Params,
    target: &CalibrationTarget<M>,
    init: &M::State,
    cfg: &IntegratorConfig,
) -> Result<ForwardRun<M::State>, ObjectiveError> {
    match target.model.time_average(params, init, target.window, cfg) {
        Ok((moments, final_state)) => {
            let misfit = Misfit::Finite(weighted_misfit(&moments, &target.mean, &target.noise)?);
            Ok(ForwardRun {
                moments: Some(moments),
                misfit,
                final_state,
            })
        }
        Err(DynamicsError::BlowUp { step, time, .. }) => Ok(ForwardRun {
            moments: None,
            misfit: Misfit::Diverged { step, time },
            final_state: init.clone(),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Observational objective from the full system; returns the misfit and the
/// state to start the next evaluation from.
pub fn evaluate_jo(
    params: &Params,
    target: &CalibrationTarget<FullModel>,
    init: &ModelState,
    cfg: &IntegratorConfig,
) -> Result<(Misfit, ModelState), ObjectiveError> {
    let run = evaluate(params, target, init, cfg)?;
    Ok((run.misfit, run.final_state))
}

/// High-resolution objective from a single fast column. Only `h`, `c` and `b`
/// of `params` matter.
pub fn evaluate_js(
    params: &Params,
    target: &CalibrationTarget<FastModel>,
    init: &FastState,
    cfg: &IntegratorConfig,
) -> Result<(Misfit, FastState), ObjectiveError> {
    let run = evaluate(params, target, init, cfg)?;
    Ok((run.misfit, run.final_state))
}

/// `U = J - sum_i log p_i(theta_i)`; `+inf` outside the prior support.
pub fn potential_energy(params: &Params, misfit: f64, priors: &PriorSet) -> f64 {
    let lp = priors.log_density(params);
    if lp == f64::NEG_INFINITY || misfit.is_nan() {
        return f64::INFINITY;
    }
    misfit - lp
}
