//! Summaries of samples and ensembles: marginal histograms, quantiles and the
//! parameter error norm.

use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::dynamics::{ParamName, Params};

pub const DEFAULT_BINS: usize = 30;

/// Euclidean distance between two parameter vectors in constrained coordinates.
pub fn error_norm(estimate: &Params, truth: &Params) -> f64 {
    estimate
        .to_array()
        .iter()
        .zip(truth.to_array())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Monte Carlo standard error of the mean by non-overlapping batch means.
pub fn batch_means_mcse(values: &[f64], n_batches: usize) -> f64 {
    let size = values.len() / n_batches.max(1);
    assert!(size > 0, "fewer samples than batches");
    let means: Vec<f64> = values
        .chunks_exact(size)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let (_, sd) = mean_std(&means);
    let b = means.len() as f64;
    sd * (b / (b - 1.0)).sqrt() / b.sqrt()
}

/// Linearly interpolated quantile of `values` at level `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central interval holding `level` of the sample mass.
pub fn central_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    (quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail))
}

/// Marginal histogram with equal-width bins over the sample range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub param: ParamName,
    /// `masses.len() + 1` increasing bin edges.
    pub edges: Vec<f64>,
    /// Fraction of samples per bin; sums to one.
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn from_values(param: ParamName, values: &[f64], bins: usize) -> Result<Self, CalibrationError> {
        if bins == 0 {
            return Err(CalibrationError::Bins);
        }
        if values.is_empty() {
            return Err(CalibrationError::EmptySamples);
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Ok(Self {
                param,
                edges: vec![lo, hi],
                masses: vec![1.0],
            });
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let mut counts = vec![0usize; bins];
        for v in values {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let n = values.len() as f64;
        Ok(Self {
            param,
            edges,
            masses: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// Probability density per bin.
    pub fn densities(&self) -> Vec<f64> {
        self.masses
            .iter()
            .zip(self.edges.windows(2))
            .map(|(m, e)| if e[1] > e[0] { m / (e[1] - e[0]) } else { f64::INFINITY })
            .collect()
    }

    /// Center of the bin with the largest mass; the first such bin on ties.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, m) in self.masses.iter().enumerate() {
            if *m > self.masses[best] {
                best = i;
            }
        }
        0.5 * (self.edges[best] + self.edges[best + 1])
    }
}

/// One marginal histogram per parameter in `names`, over the retained samples.
pub fn estimate_posterior_pdf(samples: &[Params], names: &[ParamName], bins: usize) -> Result<Vec<Histogram>, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySamples);
    }
    names
        .iter()
        .map(|&n| {
            let values: Vec<f64> = samples.iter().map(|p| p.get(n)).collect();
            Histogram::from_values(n, &values, bins)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn error_norm_examples() {
        let truth = Params::reference();
        assert_eq!(error_norm(&Params::new(9.0, 1.0, 10.0, 10.0), &truth), 1.0);
        assert_eq!(error_norm(&truth, &truth), 0.0);
        let table = Params::new(9.63, 0.982, 8.34, 9.93);
        assert_relative_eq!(error_norm(&table, &truth), 1.702, epsilon = 5e-4);
    }

    #[test]
    fn identical_samples_give_one_bin() {
        let samples = vec![Params::reference(); 7];
        let h = estimate_posterior_pdf(&samples, &[ParamName::Forcing], 30).unwrap();
        assert_eq!(h[0].masses, vec![1.0]);
        assert_eq!(h[0].mode(), 10.0);
    }

    #[test]
    fn masses_sum_to_one() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 0.37).collect();
        let h = Histogram::from_values(ParamName::Coupling, &values, 17).unwrap();
        assert_eq!(h.bins(), 17);
        assert_eq!(h.edges.len(), 18);
        assert!((h.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_errors() {
        assert!(matches!(
            Histogram::from_values(ParamName::Forcing, &[1.0], 0),
            Err(CalibrationError::Bins)
        ));
        assert!(matches!(
            estimate_posterior_pdf(&[], &[ParamName::Forcing], 3),
            Err(CalibrationError::EmptySamples)
        ));
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&v, 0.1), 1.4);
        let (lo, hi) = central_interval(&v, 0.5);
        assert_eq!((lo, hi), (2.0, 4.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn mcse_of_independent_batches() {
        // batch means alternate between 0 and 2: sample sd of the means is 1
        let mut v = Vec::new();
        for b in 0..10 {
            v.extend(std::iter::repeat(if b % 2 == 0 { 0.0 } else { 2.0 }).take(5));
        }
        let expected = (10.0f64 / 9.0).sqrt() / 10f64.sqrt();
        assert_relative_eq!(batch_means_mcse(&v, 10), expected, max_relative = 1e-12);
    }

    #[test]
    fn mode_of_skewed_sample() {
        let mut v = vec![0.0, 10.0];
        v.extend(std::iter::repeat(2.1).take(5));
        let h = Histogram::from_values(ParamName::Nonlinearity, &v, 10).unwrap();
        assert_relative_eq!(h.mode(), 2.5);
    }
}
