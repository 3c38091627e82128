//! Independent per-parameter priors and the unconstrained coordinates the
//! samplers work in. Normal priors act on the parameter itself; log-normal
//! priors act on its logarithm, which is also the unconstrained coordinate.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::dynamics::{ParamName, Params};

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("{param} = {value} lies outside the prior support")]
    OutOfSupport { param: &'static str, value: f64 },
    #[error("prior variance must be positive, got {0}")]
    Variance(f64),
    #[error("expected {expected} unconstrained coordinates, got {got}")]
    Length { expected: usize, got: usize },
    #[error("parameter {0} appears twice")]
    Duplicate(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    Normal { mean: f64, variance: f64 },
    /// Normal in `log x` with the given mean and variance.
    LogNormal { log_mean: f64, log_variance: f64 },
}

fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - 0.5 * (x - mean) * (x - mean) / variance
}

fn normal_cdf(x: f64, mean: f64, variance: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (2.0 * variance).sqrt())
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), PriorError> {
        let v = match *self {
            PriorSpec::Normal { variance, .. } => variance,
            PriorSpec::LogNormal { log_variance, .. } => log_variance,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(PriorError::Variance(v));
        }
        Ok(())
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { mean, variance } => normal_log_pdf(x, mean, variance),
            PriorSpec::LogNormal { log_mean, log_variance } => {
                if x <= 0.0 || x.is_nan() {
                    return f64::NEG_INFINITY;
                }
                let l = x.ln();
                normal_log_pdf(l, log_mean, log_variance) - l
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { mean, variance } => normal_cdf(x, mean, variance),
            PriorSpec::LogNormal { log_mean, log_variance } => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal_cdf(x.ln(), log_mean, log_variance)
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match *self {
            PriorSpec::Normal { mean, variance } => mean + variance.sqrt() * z,
            PriorSpec::LogNormal { log_mean, log_variance } => (log_mean + log_variance.sqrt() * z).exp(),
        }
    }

    pub fn to_unconstrained(&self, x: f64) -> Option<f64> {
        match self {
            PriorSpec::Normal { .. } => Some(x),
            PriorSpec::LogNormal { .. } => (x > 0.0).then(|| x.ln()),
        }
    }

    pub fn from_unconstrained(&self, u: f64) -> f64 {
        match self {
            PriorSpec::Normal { .. } => u,
            PriorSpec::LogNormal { .. } => u.exp(),
        }
    }

    /// `log |dx/du|` at unconstrained coordinate `u`.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match self {
            PriorSpec::Normal { .. } => 0.0,
            PriorSpec::LogNormal { .. } => u,
        }
    }

    /// Prior standard deviation in unconstrained coordinates.
    pub fn unconstrained_std(&self) -> f64 {
        match *self {
            PriorSpec::Normal { variance, .. } => variance.sqrt(),
            PriorSpec::LogNormal { log_variance, .. } => log_variance.sqrt(),
        }
    }

    /// Mode of the density in unconstrained coordinates, mapped back.
    pub fn center(&self) -> f64 {
        match *self {
            PriorSpec::Normal { mean, .. } => mean,
            PriorSpec::LogNormal { log_mean, .. } => log_mean.exp(),
        }
    }
}

/// Ordered product prior over the calibrated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    entries: Vec<(ParamName, PriorSpec)>,
}

impl PriorSet {
    /// Panics on duplicate parameters or invalid variances; see [`PriorSet::try_new`].
    pub fn new(entries: Vec<(ParamName, PriorSpec)>) -> Self {
        Self::try_new(entries).expect("valid prior set")
    }

    pub fn try_new(entries: Vec<(ParamName, PriorSpec)>) -> Result<Self, PriorError> {
        for (i, (name, spec)) in entries.iter().enumerate() {
            spec.validate()?;
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(PriorError::Duplicate(name.label()));
            }
        }
        Ok(Self { entries })
    }

    /// `F ~ N(10, 10)`, `h ~ N(0, 1)`, `log c ~ N(2, 0.1)`, `b ~ N(5, 10)`.
    pub fn standard() -> Self {
        Self::new(vec![
            (ParamName::Forcing, PriorSpec::Normal { mean: 10.0, variance: 10.0 }),
            (ParamName::Coupling, PriorSpec::Normal { mean: 0.0, variance: 1.0 }),
            (
                ParamName::DampingRatio,
                PriorSpec::LogNormal {
                    log_mean: 2.0,
                    log_variance: 0.1,
                },
            ),
            (ParamName::Nonlinearity, PriorSpec::Normal { mean: 5.0, variance: 10.0 }),
        ])
    }

    /// The default priors restricted to the parameters of the fast dynamics.
    pub fn fast_default() -> Self {
        Self::standard().restricted(&[ParamName::Coupling, ParamName::DampingRatio, ParamName::Nonlinearity])
    }

    pub fn restricted(&self, names: &[ParamName]) -> Self {
        Self {
            entries: self.entries.iter().filter(|(n, _)| names.contains(n)).copied().collect(),
        }
    }

    pub fn entries(&self) -> &[(ParamName, PriorSpec)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<ParamName> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: ParamName) -> Option<&PriorSpec> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, s)| s)
    }

    /// Sum of marginal log densities over the calibrated parameters.
    pub fn log_density(&self, params: &Params) -> f64 {
        self.entries.iter().map(|(n, s)| s.log_pdf(params.get(*n))).sum()
    }

    /// Independent draws for the calibrated parameters; others are taken from `base`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, base: &Params) -> Params {
        let mut p = *base;
        for (n, s) in &self.entries {
            p.set(*n, s.sample(rng));
        }
        p
    }

    pub fn to_unconstrained(&self, params: &Params) -> Result<Vec<f64>, PriorError> {
        self.entries
            .iter()
            .map(|(n, s)| {
                let v = params.get(*n);
                s.to_unconstrained(v).ok_or(PriorError::OutOfSupport { param: n.label(), value: v })
            })
            .collect()
    }

    /// Map unconstrained coordinates back, filling uncalibrated parameters from `base`.
    pub fn from_unconstrained(&self, u: &[f64], base: &Params) -> Params {
        assert_eq!(u.len(), self.entries.len(), "unconstrained vector length");
        let mut p = *base;
        for ((n, s), &x) in self.entries.iter().zip(u) {
            p.set(*n, s.from_unconstrained(x));
        }
        p
    }

    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        self.entries.iter().zip(u).map(|((_, s), &x)| s.log_jacobian(x)).sum()
    }

    /// Log density of the prior pushed forward to unconstrained coordinates.
    pub fn log_density_unconstrained(&self, u: &[f64], base: &Params) -> f64 {
        self.log_density(&self.from_unconstrained(u, base)) + self.log_jacobian(u)
    }

    pub fn unconstrained_std(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, s)| s.unconstrained_std()).collect()
    }
}
