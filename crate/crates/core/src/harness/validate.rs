//! Self-checks of the numerics: each reports a measured value against a threshold.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::output::SeedBook;
use super::HarnessError;
use crate::calibrate::diagnostics::{batch_means_mcse, mean_std};
use crate::calibrate::{eki_update_with, sample_rwm, Energy, McmcConfig};
use crate::dynamics::{integrate, run_field, Conservative, IntegratorConfig, ModelState, Params, SystemShape};
use crate::priors::{PriorSet, PriorSpec};
use crate::statistics::{control_run_variances, relative_residuals};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < threshold`.
    pub fn below(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            passed: measured < threshold,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<32} measured {:<12.4e} threshold {:.4e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold
            )?;
        }
        Ok(())
    }
}

pub fn run_validation(cfg: &ExperimentConfig, seeds: &mut SeedBook) -> Result<ValidationReport, HarnessError> {
    let v = &cfg.validate;
    let mut checks = Vec::new();
    checks.push(Check::below(
        "energy_drift",
        energy_drift(
            SystemShape::new(ENERGY_SHAPE.0, ENERGY_SHAPE.1)?,
            &cfg.truth(),
            v.coupling_sign,
            1.0,
            ENERGY_SEED,
        )?,
        v.energy_tol,
    ));

    let control = control_run_variances(
        &super::experiments::full_model(cfg),
        &cfg.truth(),
        v.identity_duration,
        &cfg.integrator(),
        seeds.get("validate/identities"),
        None,
    )?;
    let (rs, rf) = relative_residuals(&control.layout, &control.mean, &cfg.truth())?;
    checks.push(Check::below("identity_slow_relative", rs, v.identity_tol));
    checks.push(Check::below("identity_fast_relative", rf, v.identity_tol));

    let order = convergence_order(cfg.shape(), &cfg.truth(), seeds.get("validate/order"))?;
    checks.push(Check::below("integrator_order_error", (order - 4.0).abs(), 0.5));

    checks.push(Check::below(
        "linear_eki_oracle",
        linear_eki_discrepancy(seeds.get("validate/eki"), 50)?,
        1e-8,
    ));

    let (mean_z, var_err) = gaussian_mcmc_check(v.mcmc_steps, seeds.get("validate/mcmc"))?;
    checks.push(Check::below("gaussian_mcmc_mean_in_mcse", mean_z, 3.0));
    checks.push(Check::below("gaussian_mcmc_variance_rel", var_err, 0.15));

    checks.push(Check::below("prior_normalization", prior_normalization_error(&PriorSet::standard()), 1e-6));
    Ok(ValidationReport { checks })
}

/// Shape and seed of the conservation check, independent of the experiment profile.
pub const ENERGY_SHAPE: (usize, usize) = (36, 10);
pub const ENERGY_SEED: u64 = 0;

/// Relative change of `sum X^2 + sum Y^2` under the conservative dynamics over
/// `duration` days from the generic initial condition drawn with `seed`.
pub fn energy_drift(shape: SystemShape, params: &Params, coupling_sign: f64, duration: f64, seed: u64) -> Result<f64, HarnessError> {
    let start = ModelState::random(shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut u = start.as_slice().to_vec();
    let e0 = start.total_energy();
    let field = Conservative {
        sign: coupling_sign,
        ..Conservative::new(shape, *params)
    };
    let cfg = IntegratorConfig::default();
    let mut t = 0.0;
    run_field(&field, &mut u, &mut t, cfg.steps_for(duration), &cfg, params, |_, _| {})?;
    let end = ModelState::from_parts(shape, &u[..shape.n_slow], &u[shape.n_slow..])?;
    Ok((end.total_energy() - e0).abs() / e0)
}

/// Observed order of the integrator from errors at two step sizes against a
/// fine reference solution.
pub fn convergence_order(shape: SystemShape, params: &Params, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = ModelState::random(shape, &mut rng);
    for y in start.fast_mut() {
        *y = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let start = integrate(&start, params, 5.0, &IntegratorConfig::default(), |_| {})?;
    let horizon = 0.2;
    let run = |dt: f64| -> Result<Vec<f64>, HarnessError> {
        let cfg = IntegratorConfig::new(dt)?;
        Ok(integrate(&start, params, horizon, &cfg, |_| {})?.as_slice().to_vec())
    };
    let reference = run(0.001 / 16.0)?;
    let err = |dt: f64| -> Result<f64, HarnessError> {
        let u = run(dt)?;
        Ok(u.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    };
    let coarse = err(0.002)?;
    let fine = err(0.001)?;
    Ok((coarse / fine).log2())
}

/// Random linear forward model `w = A theta` from 5 parameters to 8 outputs,
/// with `m` members drawn from `N(prior_mean, I)` and data `A theta* + eta`
/// for a prior draw `theta*` and `eta ~ N(0, Sigma)`.
pub struct LinearProblem {
    pub prior_mean: Vec<f64>,
    pub members: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub noise: Vec<f64>,
    pub operator: DMatrix<f64>,
}

pub fn linear_problem(seed: u64, m: usize) -> LinearProblem {
    let (p, n) = (5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let operator = DMatrix::from_fn(n, p, |_, _| normal());
    let prior_mean: Vec<f64> = (0..p).map(|i| 1.0 + 0.5 * i as f64).collect();
    let noise: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
    let truth: Vec<f64> = prior_mean.iter().map(|mu| mu + normal()).collect();
    let clean = &operator * DVector::from_column_slice(&truth);
    let target = clean.iter().zip(&noise).map(|(w, s)| w + s.sqrt() * normal()).collect();
    let members: Vec<Vec<f64>> = (0..m)
        .map(|_| prior_mean.iter().map(|mu| mu + normal()).collect())
        .collect();
    let outputs = members
        .iter()
        .map(|t| (&operator * DVector::from_column_slice(t)).iter().copied().collect())
        .collect();
    LinearProblem {
        prior_mean,
        members,
        outputs,
        target,
        noise,
        operator,
    }
}

/// Kalman update of the ensemble mean from given parameter covariance `c`:
/// `m + C A^T (A C A^T + Sigma)^-1 (y - A m)`, solved by LU.
pub fn kalman_mean(mean: &DVector<f64>, c: &DMatrix<f64>, a: &DMatrix<f64>, target: &[f64], noise: &[f64]) -> DVector<f64> {
    let s = a * c * a.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(noise));
    let innov = DVector::from_column_slice(target) - a * mean;
    let gain_rhs = s.lu().solve(&innov).expect("innovation covariance is nonsingular");
    mean + c * a.transpose() * gain_rhs
}

pub fn ensemble_mean_cov(members: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let p = members[0].len();
    let m = members.len() as f64;
    let mut mean = DVector::zeros(p);
    for t in members {
        mean += DVector::from_column_slice(t);
    }
    mean /= m;
    let mut cov = DMatrix::zeros(p, p);
    for t in members {
        let d = DVector::from_column_slice(t) - &mean;
        cov += &d * d.transpose();
    }
    (mean, cov / m)
}

/// Relative difference between the updated ensemble mean and the Kalman mean
/// update computed from the ensemble's own covariance.
pub fn linear_eki_discrepancy(seed: u64, m: usize) -> Result<f64, HarnessError> {
    let lp = linear_problem(seed, m);
    let updated = eki_update_with(&lp.members, &lp.outputs, &lp.target, &lp.noise, None)?;
    let (mean, cov) = ensemble_mean_cov(&lp.members);
    let oracle = kalman_mean(&mean, &cov, &lp.operator, &lp.target, &lp.noise);
    let (got, _) = ensemble_mean_cov(&updated);
    Ok((got - &oracle).norm() / oracle.norm())
}

/// Random-walk chain on a standard Gaussian in four dimensions. Returns the
/// largest `|mean| / MCSE` and the largest relative variance error.
pub fn gaussian_mcmc_check(n_steps: usize, seed: u64) -> Result<(f64, f64), HarnessError> {
    let dim = 4;
    let burn_in = 1000.min(n_steps / 10);
    let cfg = McmcConfig {
        n_iter: n_steps,
        burn_in,
        thin: 1,
        proposal_scale: Vec::new(),
        adapt: false,
        seed,
    };
    let scale = vec![2.38 / (dim as f64).sqrt(); dim];
    let samples = sample_rwm(&cfg, vec![0.0; dim], &scale, |u| {
        Energy::plain(0.5 * u.iter().map(|x| x * x).sum::<f64>())
    })?;
    let kept = &samples[burn_in..];
    let mut worst_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for k in 0..dim {
        let x: Vec<f64> = kept.iter().map(|s| s.point[k]).collect();
        let (mean, sd) = mean_std(&x);
        worst_z = worst_z.max(mean.abs() / batch_means_mcse(&x, 50));
        worst_var = worst_var.max((sd * sd - 1.0).abs());
    }
    Ok((worst_z, worst_var))
}

/// Largest deviation from one of the numerically integrated marginal densities.
pub fn prior_normalization_error(priors: &PriorSet) -> f64 {
    priors
        .entries()
        .iter()
        .map(|(_, spec)| {
            let (lo, hi) = match *spec {
                PriorSpec::Normal { mean, variance } => (mean - 12.0 * variance.sqrt(), mean + 12.0 * variance.sqrt()),
                PriorSpec::LogNormal { log_mean, log_variance } => (0.0, (log_mean + 12.0 * log_variance.sqrt()).exp()),
            };
            (simpson(|x| spec.log_pdf(x).exp(), lo, hi, 200_000) - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_detects_sign_flip() {
        let shape = SystemShape::new(ENERGY_SHAPE.0, ENERGY_SHAPE.1).unwrap();
        let p = Params::reference();
        let ok = energy_drift(shape, &p, 1.0, 1.0, ENERGY_SEED).unwrap();
        let bad = energy_drift(shape, &p, -1.0, 1.0, ENERGY_SEED).unwrap();
        assert!(ok < 1e-6, "{ok}");
        assert!(bad > 1e-3, "{bad}");
    }

    #[test]
    fn linear_oracle_agrees() {
        assert!(linear_eki_discrepancy(11, 20).unwrap() < 1e-8);
    }

    #[test]
    fn prior_densities_integrate_to_one() {
        assert!(prior_normalization_error(&PriorSet::standard()) < 1e-6);
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        let v = simpson(|x| x * x * x + x, 0.0, 2.0, 10);
        assert!((v - 6.0).abs() < 1e-12);
    }

    #[test]
    fn report_formatting() {
        let r = ValidationReport {
            checks: vec![Check::below("a", 1.0, 2.0), Check::below("b", 3.0, 2.0)],
        };
        assert_eq!(r.failures(), 1);
        let text = r.to_string();
        assert!(text.contains("PASS a"));
        assert!(text.contains("FAIL b"));
    }
}
