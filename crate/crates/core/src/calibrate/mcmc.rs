use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::dynamics::{IntegratorConfig, ParamName, Params};
use crate::objective::{evaluate, potential_energy, CalibrationTarget};
use crate::priors::PriorSet;
use crate::seeding;
use crate::statistics::ForwardModel;

/// Default proposal step as a fraction of the prior standard deviation.
pub const DEFAULT_SCALE_FRACTION: f64 = 0.02;

const ADAPT_WINDOW: usize = 25;
const ADAPT_LOW: f64 = 0.20;
const ADAPT_HIGH: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in sample, starting with the first.
    pub thin: usize,
    /// Proposal standard deviations in unconstrained coordinates. Empty means
    /// `DEFAULT_SCALE_FRACTION` times the prior standard deviations.
    #[serde(default)]
    pub proposal_scale: Vec<f64>,
    /// Rescale proposals during burn-in towards 20-30% acceptance; frozen afterwards.
    #[serde(default)]
    pub adapt: bool,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 2200,
            burn_in: 200,
            thin: 2,
            proposal_scale: Vec::new(),
            adapt: true,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.burn_in >= self.n_iter {
            return Err(CalibrationError::Config(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(CalibrationError::Config("thinning stride must be at least 1".into()));
        }
        if self.proposal_scale.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(CalibrationError::Config("proposal scales must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn retained_len(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }

    fn scale_for(&self, priors: &PriorSet) -> Result<Vec<f64>, CalibrationError> {
        if self.proposal_scale.is_empty() {
            return Ok(priors
                .unconstrained_std()
                .into_iter()
                .map(|s| DEFAULT_SCALE_FRACTION * s)
                .collect());
        }
        if self.proposal_scale.len() != priors.len() {
            return Err(CalibrationError::Config(format!(
                "{} proposal scales for {} parameters",
                self.proposal_scale.len(),
                priors.len()
            )));
        }
        Ok(self.proposal_scale.clone())
    }
}

/// Potential at a point, split so that acceptance can use the density in
/// unconstrained coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    /// `U(theta)`, the negative log posterior in constrained coordinates.
    pub potential: f64,
    /// `log |d theta / d u|` at the point.
    pub log_jacobian: f64,
}

impl Energy {
    pub fn plain(potential: f64) -> Self {
        Self {
            potential,
            log_jacobian: 0.0,
        }
    }

    /// Negative log target density in unconstrained coordinates.
    pub fn unconstrained(&self) -> f64 {
        if self.potential.is_nan() {
            return f64::INFINITY;
        }
        self.potential - self.log_jacobian
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RwmPoint {
    pub point: Vec<f64>,
    pub energy: Energy,
}

/// One random-walk Metropolis transition with proposal `N(0, diag(scale^2))`.
/// Returns the new point and whether the proposal was accepted.
pub fn rwm_step<R, E>(current: &RwmPoint, rng: &mut R, scale: &[f64], evaluate: E) -> (RwmPoint, bool)
where
    R: Rng + ?Sized,
    E: FnOnce(&[f64]) -> Energy,
{
    let proposal: Vec<f64> = current
        .point
        .iter()
        .zip(scale)
        .map(|(x, s)| x + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let energy = evaluate(&proposal);
    let u: f64 = rng.gen();
    let log_ratio = current.energy.unconstrained() - energy.unconstrained();
    if u < log_ratio.exp() {
        (RwmPoint { point: proposal, energy }, true)
    } else {
        (current.clone(), false)
    }
}

/// Burn-in proposal scaling by a single global factor.
#[derive(Debug, Clone)]
struct Adapter {
    enabled: bool,
    burn_in: usize,
    factor: f64,
    window_accepts: usize,
    window_len: usize,
}

impl Adapter {
    fn new(enabled: bool, burn_in: usize) -> Self {
        Self {
            enabled,
            burn_in,
            factor: 1.0,
            window_accepts: 0,
            window_len: 0,
        }
    }

    fn record(&mut self, iter: usize, accepted: bool) {
        if !self.enabled || iter >= self.burn_in {
            return;
        }
        self.window_len += 1;
        self.window_accepts += accepted as usize;
        if self.window_len == ADAPT_WINDOW {
            let rate = self.window_accepts as f64 / ADAPT_WINDOW as f64;
            if rate < ADAPT_LOW {
                self.factor *= 0.7;
            } else if rate > ADAPT_HIGH {
                self.factor *= 1.4;
            }
            self.window_len = 0;
            self.window_accepts = 0;
        }
    }

    fn scaled(&self, base: &[f64]) -> Vec<f64> {
        base.iter().map(|s| s * self.factor).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub point: Vec<f64>,
    pub energy: Energy,
    pub accepted: bool,
}

/// Random-walk Metropolis on an arbitrary energy in unconstrained coordinates.
pub fn sample_rwm<E>(cfg: &McmcConfig, init: Vec<f64>, scale: &[f64], mut energy: E) -> Result<Vec<Sample>, CalibrationError>
where
    E: FnMut(&[f64]) -> Energy,
{
    cfg.validate()?;
    if scale.len() != init.len() {
        return Err(CalibrationError::Config("scale and initial point differ in length".into()));
    }
    let mut rng = seeding::stream(cfg.seed, "mcmc/proposals");
    let mut adapter = Adapter::new(cfg.adapt, cfg.burn_in);
    let e0 = energy(&init);
    let mut current = RwmPoint { point: init, energy: e0 };
    let mut out = Vec::with_capacity(cfg.n_iter);
    for iter in 0..cfg.n_iter {
        let s = adapter.scaled(scale);
        let (next, accepted) = rwm_step(&current, &mut rng, &s, &mut energy);
        adapter.record(iter, accepted);
        current = next;
        out.push(Sample {
            point: current.point.clone(),
            energy: current.energy,
            accepted,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ChainLink<S> {
    pub params: Params,
    /// `U(theta)` at `params`.
    pub potential: f64,
    pub accepted: bool,
    /// Initial state of the forward integration that produced `potential`.
    pub state: Option<Arc<S>>,
}

#[derive(Debug, Clone)]
pub struct Chain<S> {
    pub names: Vec<ParamName>,
    pub links: Vec<ChainLink<S>>,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal scales in force after burn-in.
    pub final_scale: Vec<f64>,
    /// Proposals whose forward integration diverged.
    pub diverged: usize,
}

impl<S> Chain<S> {
    pub fn acceptance_rate(&self) -> f64 {
        rate(&self.links)
    }

    pub fn post_burn_in_acceptance_rate(&self) -> f64 {
        rate(&self.links[self.burn_in.min(self.links.len())..])
    }

    /// Post-burn-in links at even offsets of the thinning stride.
    pub fn retained(&self) -> impl Iterator<Item = &ChainLink<S>> {
        self.links.iter().skip(self.burn_in).step_by(self.thin.max(1))
    }

    pub fn retained_params(&self) -> Vec<Params> {
        self.retained().map(|l| l.params).collect()
    }
}

fn rate<S>(links: &[ChainLink<S>]) -> f64 {
    if links.is_empty() {
        return 0.0;
    }
    links.iter().filter(|l| l.accepted).count() as f64 / links.len() as f64
}

/// Sample the posterior of the calibrated parameters in `priors`, starting at
/// `init` (typically an ensemble Kalman estimate). Every forward integration
/// starts from the end state of the previous one, accepted or not.
pub fn run_mcmc<M: ForwardModel>(
    cfg: &McmcConfig,
    target: &CalibrationTarget<M>,
    priors: &PriorSet,
    init: &Params,
    init_state: M::State,
    integ: &IntegratorConfig,
) -> Result<Chain<M::State>, CalibrationError> {
    cfg.validate()?;
    let base_scale = cfg.scale_for(priors)?;
    let mut rng = seeding::stream(cfg.seed, "mcmc/proposals");
    let mut adapter = Adapter::new(cfg.adapt, cfg.burn_in);

    let mut state = Arc::new(init_state);
    let mut diverged = 0usize;
    let mut err = None;
    // the closure chains states and remembers the start of the latest integration
    let mut eval = |u: &[f64], state: &mut Arc<M::State>, last_start: &mut Arc<M::State>| -> Energy {
        let params = priors.from_unconstrained(u, init);
        let log_jacobian = priors.log_jacobian(u);
        if priors.log_density(&params) == f64::NEG_INFINITY {
            return Energy {
                potential: f64::INFINITY,
                log_jacobian,
            };
        }
        *last_start = Arc::clone(state);
        match evaluate(&params, target, state, integ) {
            Ok(run) => {
                if run.misfit.is_diverged() {
                    diverged += 1;
                } else {
                    *state = Arc::new(run.final_state);
                }
                Energy {
                    potential: potential_energy(&params, run.misfit.value(), priors),
                    log_jacobian,
                }
            }
            Err(e) => {
                err.get_or_insert(e);
                Energy {
                    potential: f64::INFINITY,
                    log_jacobian,
                }
            }
        }
    };

    let u0 = priors.to_unconstrained(init)?;
    let mut last_start = Arc::clone(&state);
    let e0 = eval(&u0, &mut state, &mut last_start);
    let mut current = RwmPoint { point: u0, energy: e0 };
    let mut current_start = Arc::clone(&last_start);
    let mut links = Vec::with_capacity(cfg.n_iter);
    for iter in 0..cfg.n_iter {
        let scale = adapter.scaled(&base_scale);
        let (next, accepted) = rwm_step(&current, &mut rng, &scale, |u| eval(u, &mut state, &mut last_start));
        adapter.record(iter, accepted);
        if accepted {
            current_start = Arc::clone(&last_start);
        }
        current = next;
        links.push(ChainLink {
            params: priors.from_unconstrained(&current.point, init),
            potential: current.energy.potential,
            accepted,
            state: Some(Arc::clone(&current_start)),
        });
    }
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(Chain {
        names: priors.names(),
        links,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        final_scale: adapter.scaled(&base_scale),
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point(u: f64) -> RwmPoint {
        RwmPoint {
            point: vec![0.0],
            energy: Energy::plain(u),
        }
    }

    #[test]
    fn downhill_always_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (_, acc) = rwm_step(&point(5.0), &mut rng, &[1.0], |_| Energy::plain(4.0));
            assert!(acc);
        }
    }

    #[test]
    fn infinite_proposal_always_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (p, acc) = rwm_step(&point(5.0), &mut rng, &[1.0], |_| Energy::plain(f64::INFINITY));
            assert!(!acc);
            assert_eq!(p, point(5.0));
            let (_, acc) = rwm_step(&point(5.0), &mut rng, &[1.0], |_| Energy::plain(f64::NAN));
            assert!(!acc);
        }
    }

    #[test]
    fn acceptance_frequency_matches_metropolis_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let accepted = (0..n)
            .filter(|_| rwm_step(&point(0.0), &mut rng, &[1.0], |_| Energy::plain(2f64.ln())).1)
            .count();
        let p = accepted as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * se, "acceptance {p}");
    }

    #[test]
    fn jacobian_enters_acceptance() {
        let e = Energy {
            potential: 3.0,
            log_jacobian: 1.0,
        };
        assert_eq!(e.unconstrained(), 2.0);
    }

    #[test]
    fn zero_scale_never_moves() {
        let cfg = McmcConfig {
            n_iter: 50,
            burn_in: 10,
            thin: 1,
            adapt: false,
            ..Default::default()
        };
        let out = sample_rwm(&cfg, vec![0.3, -0.2], &[0.0, 0.0], |u| {
            Energy::plain(0.5 * u.iter().map(|x| x * x).sum::<f64>())
        })
        .unwrap();
        assert!(out.iter().all(|s| s.accepted && s.point == vec![0.3, -0.2]));
    }

    #[test]
    fn config_validation() {
        let mut cfg = McmcConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.retained_len(), 1000);
        cfg.burn_in = cfg.n_iter;
        assert!(cfg.validate().is_err());
        let cfg = McmcConfig {
            thin: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = McmcConfig {
            n_iter: 202,
            ..Default::default()
        };
        assert_eq!(cfg.retained_len(), 1);
    }

    #[test]
    fn adapter_moves_towards_band() {
        let mut a = Adapter::new(true, 100);
        for i in 0..25 {
            a.record(i, false);
        }
        assert!(a.factor < 1.0);
        let mut b = Adapter::new(true, 100);
        for i in 0..25 {
            b.record(i, true);
        }
        assert!(b.factor > 1.0);
        let mut c = Adapter::new(true, 10);
        for i in 10..100 {
            c.record(i, false);
        }
        assert_eq!(c.factor, 1.0);
    }
}
