//! Building blocks of the three experiments: control runs and targets,
//! ensemble Kalman inversions and posterior sampling.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, WarmStart};
use super::HarnessError;
use crate::calibrate::diagnostics::{central_interval, mean_std};
use crate::calibrate::{estimate_posterior_pdf, run_eki, run_mcmc, Chain, EnsembleRecord, Histogram};
use crate::dynamics::{FastState, ModelState, ParamName, Params};
use crate::objective::{CalibrationTarget, NoiseModel};
use crate::priors::PriorSet;
use crate::statistics::{control_run_variances, pool_variances, ControlRun, FastModel, ForwardModel, FullModel};

pub fn full_model(cfg: &ExperimentConfig) -> FullModel {
    FullModel { shape: cfg.shape() }
}

pub fn fast_model(cfg: &ExperimentConfig) -> FastModel {
    FastModel {
        n_fast: cfg.system.n_fast,
        slow_value: cfg.fast.slow_value,
    }
}

/// Control run of the full system at the true parameters.
pub fn full_control(cfg: &ExperimentConfig, seed: u64) -> Result<ControlRun<ModelState>, HarnessError> {
    Ok(control_run_variances(
        &full_model(cfg),
        &cfg.truth(),
        cfg.control.duration,
        &cfg.integrator(),
        seed,
        Some(cfg.snapshot_plan()),
    )?)
}

/// Control run of one fast column at the true parameters.
pub fn fast_control(cfg: &ExperimentConfig, seed: u64) -> Result<ControlRun<FastState>, HarnessError> {
    let plan = crate::statistics::SnapshotPlan {
        after: cfg.control.snapshot_after.min(cfg.fast.control_duration),
        ..cfg.snapshot_plan()
    };
    Ok(control_run_variances(
        &fast_model(cfg),
        &cfg.truth(),
        cfg.fast.control_duration,
        &cfg.integrator(),
        seed,
        Some(plan),
    )?)
}

pub fn noise_variances<S>(cfg: &ExperimentConfig, control: &ControlRun<S>) -> Result<Vec<f64>, HarnessError> {
    if cfg.control.pooled_variance {
        Ok(pool_variances(&control.layout, &control.variance)?)
    } else {
        Ok(control.variance.clone())
    }
}

pub fn target<M: ForwardModel>(
    cfg: &ExperimentConfig,
    model: M,
    control: &ControlRun<M::State>,
    r: f64,
    window: f64,
) -> Result<CalibrationTarget<M>, HarnessError> {
    let noise = NoiseModel::new(r, noise_variances(cfg, control)?)?;
    Ok(CalibrationTarget::new(model, control.mean.clone(), noise, window)?)
}

/// Steady-state initial conditions drawn from a control run.
pub fn initial_pool<S: Clone>(control: &ControlRun<S>) -> Vec<S> {
    if control.snapshots.is_empty() {
        vec![control.final_state.clone()]
    } else {
        control.snapshots.clone()
    }
}

pub fn eki<M: ForwardModel>(
    cfg: &ExperimentConfig,
    target: &CalibrationTarget<M>,
    priors: &PriorSet,
    pool: &[M::State],
    ensemble_size: usize,
    seed: u64,
) -> Result<EnsembleRecord, HarnessError> {
    let truth = cfg.truth();
    Ok(run_eki(
        &cfg.eki_config(ensemble_size, seed),
        target,
        priors,
        &truth,
        pool,
        &cfg.integrator(),
        Some(&truth),
    )?)
}

/// Starting point of a chain as configured by `mcmc.warm_start`.
pub fn warm_start<M: ForwardModel>(
    cfg: &ExperimentConfig,
    target: &CalibrationTarget<M>,
    priors: &PriorSet,
    pool: &[M::State],
    seed: u64,
) -> Result<Params, HarnessError> {
    let truth = cfg.truth();
    Ok(match cfg.mcmc.warm_start {
        WarmStart::Eki => eki(cfg, target, priors, pool, cfg.mcmc.warm_start_size, seed)?.final_mean(),
        WarmStart::Prior => {
            let mut p = truth;
            for (n, s) in priors.entries() {
                p.set(*n, s.center());
            }
            p
        }
        WarmStart::Values => {
            let mut p = truth;
            for n in priors.names() {
                p.set(n, cfg.mcmc.init[n.index()]);
            }
            p
        }
    })
}

pub fn mcmc<M: ForwardModel>(
    cfg: &ExperimentConfig,
    target: &CalibrationTarget<M>,
    priors: &PriorSet,
    init: &Params,
    state: M::State,
    seed: u64,
) -> Result<Chain<M::State>, HarnessError> {
    let mc = cfg.mcmc_config(seed, &priors.unconstrained_std());
    Ok(run_mcmc(&mc, target, priors, init, state, &cfg.integrator())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub param: String,
    pub mean: f64,
    pub std: f64,
    /// `std / |mean|`.
    pub spread: f64,
    pub lo90: f64,
    pub hi90: f64,
    pub mode: f64,
    pub truth: f64,
    pub truth_inside_90: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub init: [f64; 4],
    pub acceptance_rate: f64,
    pub post_burn_in_acceptance_rate: f64,
    pub final_scale: Vec<f64>,
    pub diverged: usize,
    pub retained: usize,
    pub marginals: Vec<MarginalSummary>,
}

impl PosteriorSummary {
    pub fn marginal(&self, name: ParamName) -> Option<&MarginalSummary> {
        self.marginals.iter().find(|m| m.param == name.label())
    }

    /// Parameter with the largest normalized spread.
    pub fn widest(&self) -> Option<&str> {
        self.marginals
            .iter()
            .max_by(|a, b| a.spread.total_cmp(&b.spread))
            .map(|m| m.param.as_str())
    }
}

/// Marginal summaries and histograms of the retained samples.
pub fn summarize_chain<S>(
    chain: &Chain<S>,
    init: &Params,
    truth: &Params,
    bins: usize,
) -> Result<(PosteriorSummary, Vec<Histogram>), HarnessError> {
    let samples = chain.retained_params();
    let hists = estimate_posterior_pdf(&samples, &chain.names, bins)?;
    let marginals = chain
        .names
        .iter()
        .zip(&hists)
        .map(|(&n, h)| {
            let values: Vec<f64> = samples.iter().map(|p| p.get(n)).collect();
            let (mean, std) = mean_std(&values);
            let (lo90, hi90) = central_interval(&values, 0.9);
            let t = truth.get(n);
            MarginalSummary {
                param: n.label().to_string(),
                mean,
                std,
                spread: std / mean.abs(),
                lo90,
                hi90,
                mode: h.mode(),
                truth: t,
                truth_inside_90: lo90 <= t && t <= hi90,
            }
        })
        .collect();
    Ok((
        PosteriorSummary {
            init: init.to_array(),
            acceptance_rate: chain.acceptance_rate(),
            post_burn_in_acceptance_rate: chain.post_burn_in_acceptance_rate(),
            final_scale: chain.final_scale.clone(),
            diverged: chain.diverged,
            retained: samples.len(),
            marginals,
        },
        hists,
    ))
}
