//! Ensemble Kalman inversion with perturbed observations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{error_norm, mean_std, quantile};
use super::CalibrationError;
use crate::dynamics::{IntegratorConfig, ParamName, Params};
use crate::objective::{evaluate, CalibrationTarget};
use crate::priors::PriorSet;
use crate::seeding;
use crate::statistics::ForwardModel;

/// Where each member's forward integration starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialStateMode {
    /// Every member starts from the first pool state in every iteration.
    #[default]
    Shared,
    /// Members continue from the end of their own previous integration.
    Chained,
    /// Member `j` starts from pool state `j mod pool.len()` in every iteration.
    PerMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkiConfig {
    pub ensemble_size: usize,
    pub max_iter: usize,
    /// Perturb the target with draws from the noise model for every member.
    pub perturb: bool,
    pub seed: u64,
    #[serde(default)]
    pub initial_state: InitialStateMode,
    pub collapse_tol: f64,
}

impl Default for EkiConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 100,
            max_iter: 25,
            perturb: true,
            seed: 0,
            initial_state: InitialStateMode::Shared,
            collapse_tol: 1e-10,
        }
    }
}

impl EkiConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.ensemble_size < 2 {
            return Err(CalibrationError::Config(format!(
                "ensemble size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if !(self.collapse_tol >= 0.0) {
            return Err(CalibrationError::Config("collapse tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_ensemble(members: &[Vec<f64>], outputs: &[Vec<f64>], target: &[f64], noise: &[f64]) -> Result<(), CalibrationError> {
    if members.len() < 2 {
        return Err(CalibrationError::Config("ensemble needs at least 2 members".into()));
    }
    if outputs.len() != members.len() {
        return Err(CalibrationError::Config(format!(
            "{} outputs for {} members",
            outputs.len(),
            members.len()
        )));
    }
    let p = members[0].len();
    if members.iter().any(|m| m.len() != p) {
        return Err(CalibrationError::Config("members differ in dimension".into()));
    }
    let n = noise.len();
    if target.len() != n || outputs.iter().any(|w| w.len() != n) {
        return Err(CalibrationError::Config("output, target and noise lengths differ".into()));
    }
    Ok(())
}

fn columns(vectors: &[Vec<f64>]) -> DMatrix<f64> {
    let rows = vectors[0].len();
    DMatrix::from_fn(rows, vectors.len(), |i, j| vectors[j][i])
}

fn deviations(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut d = m.clone();
    for mut col in d.column_iter_mut() {
        col -= &mean;
    }
    d
}

/// One update with perturbations drawn from `rng` in member order.
pub fn eki_update<R: Rng + ?Sized>(
    members: &[Vec<f64>],
    outputs: &[Vec<f64>],
    target: &[f64],
    noise: &[f64],
    rng: &mut R,
    perturb: bool,
) -> Result<Vec<Vec<f64>>, CalibrationError> {
    if !perturb {
        return eki_update_with(members, outputs, target, noise, None);
    }
    let etas: Vec<Vec<f64>> = (0..members.len())
        .map(|_| draw_perturbation(rng, noise))
        .collect();
    eki_update_with(members, outputs, target, noise, Some(&etas))
}

/// `theta_j + C_tw (C_ww + Sigma)^-1 (y + eta_j - w_j)` for every member, with
/// covariances normalized by the ensemble size and `Sigma = diag(noise)`.
pub fn eki_update_with(
    members: &[Vec<f64>],
    outputs: &[Vec<f64>],
    target: &[f64],
    noise: &[f64],
    etas: Option<&[Vec<f64>]>,
) -> Result<Vec<Vec<f64>>, CalibrationError> {
    check_ensemble(members, outputs, target, noise)?;
    let m = members.len();
    if let Some(etas) = etas {
        if etas.len() != m || etas.iter().any(|e| e.len() != noise.len()) {
            return Err(CalibrationError::Config("perturbations do not match the ensemble".into()));
        }
    }
    let theta = columns(members);
    let w = columns(outputs);
    let dt = deviations(&theta);
    let dw = deviations(&w);
    let scale = 1.0 / m as f64;
    let c_tw = &dt * dw.transpose() * scale;
    let mut c_ww = &dw * dw.transpose() * scale;
    for (i, s) in noise.iter().enumerate() {
        c_ww[(i, i)] += s;
    }
    let chol = c_ww
        .cholesky()
        .ok_or_else(|| CalibrationError::Linalg("output covariance plus noise is not positive definite".into()))?;

    let y = DVector::from_column_slice(target);
    let mut innovations = DMatrix::zeros(noise.len(), m);
    for j in 0..m {
        let mut d = &y - w.column(j);
        if let Some(etas) = etas {
            d += DVector::from_column_slice(&etas[j]);
        }
        innovations.set_column(j, &d);
    }
    let increments = c_tw * chol.solve(&innovations);
    Ok((0..m)
        .map(|j| members[j].iter().zip(increments.column(j).iter()).map(|(a, b)| a + b).collect())
        .collect())
}

fn draw_perturbation<R: Rng + ?Sized>(rng: &mut R, noise: &[f64]) -> Vec<f64> {
    noise.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Ensemble state and diagnostics at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub members: Vec<Params>,
    /// Forward outputs per member; `None` for a diverged member. Empty for the
    /// final ensemble, which is not evaluated.
    pub outputs: Vec<Option<Vec<f64>>>,
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub q25: [f64; 4],
    pub q75: [f64; 4],
    pub error_norm: Option<f64>,
    pub collapsed: bool,
    pub diverged: usize,
}

impl IterationRecord {
    fn new(iteration: usize, members: Vec<Params>, unconstrained: &[Vec<f64>], tol: f64, truth: Option<&Params>) -> Self {
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        let mut q25 = [0.0; 4];
        let mut q75 = [0.0; 4];
        for name in ParamName::ALL {
            let i = name.index();
            let values: Vec<f64> = members.iter().map(|p| p.get(name)).collect();
            (mean[i], std[i]) = mean_std(&values);
            q25[i] = quantile(&values, 0.25);
            q75[i] = quantile(&values, 0.75);
        }
        let dim = unconstrained[0].len();
        let collapsed = (0..dim).all(|k| {
            let col: Vec<f64> = unconstrained.iter().map(|u| u[k]).collect();
            mean_std(&col).1 < tol
        });
        let error_norm = truth.map(|t| error_norm(&Params::from_array(mean), t));
        Self {
            iteration,
            members,
            outputs: Vec::new(),
            mean,
            std,
            q25,
            q75,
            error_norm,
            collapsed,
            diverged: 0,
        }
    }

    pub fn mean_params(&self) -> Params {
        Params::from_array(self.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub names: Vec<ParamName>,
    /// Iteration 0 is the prior ensemble; iteration `max_iter` is the final one.
    pub iterations: Vec<IterationRecord>,
}

impl EnsembleRecord {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("record holds the prior ensemble")
    }

    pub fn final_mean(&self) -> Params {
        self.last().mean_params()
    }

    pub fn first_collapse(&self) -> Option<usize> {
        self.iterations.iter().find(|r| r.collapsed).map(|r| r.iteration)
    }
}

/// Draw an ensemble from `priors`, then alternate forward evaluation and update
/// `cfg.max_iter` times. Parameters outside `priors` are taken from `base`.
pub fn run_eki<M: ForwardModel>(
    cfg: &EkiConfig,
    target: &CalibrationTarget<M>,
    priors: &PriorSet,
    base: &Params,
    pool: &[M::State],
    integ: &IntegratorConfig,
    truth: Option<&Params>,
) -> Result<EnsembleRecord, CalibrationError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(CalibrationError::Config("no initial states supplied".into()));
    }
    let m = cfg.ensemble_size;
    let mut rng = seeding::stream(cfg.seed, "eki/prior");
    let mut members: Vec<Vec<f64>> = (0..m)
        .map(|_| priors.to_unconstrained(&priors.sample(&mut rng, base)))
        .collect::<Result<_, _>>()?;
    let mut states: Vec<M::State> = (0..m)
        .map(|j| match cfg.initial_state {
            InitialStateMode::PerMember => pool[j % pool.len()].clone(),
            _ => pool[0].clone(),
        })
        .collect();

    let mut iterations = Vec::with_capacity(cfg.max_iter + 1);
    for it in 0..cfg.max_iter {
        let params: Vec<Params> = members.iter().map(|u| priors.from_unconstrained(u, base)).collect();
        let runs = params
            .par_iter()
            .zip(states.par_iter())
            .map(|(p, s)| evaluate(p, target, s, integ))
            .collect::<Result<Vec<_>, _>>()?;

        let finite: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r.moments.as_ref()).collect();
        if finite.is_empty() {
            return Err(CalibrationError::AllDiverged(it));
        }
        let n = finite[0].len();
        let fill: Vec<f64> = (0..n)
            .map(|i| finite.iter().map(|w| w[i]).sum::<f64>() / finite.len() as f64)
            .collect();
        let outputs: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| r.moments.clone().unwrap_or_else(|| fill.clone()))
            .collect();

        let mut record = IterationRecord::new(it, params, &members, cfg.collapse_tol, truth);
        record.diverged = runs.len() - finite.len();
        record.outputs = runs.iter().map(|r| r.moments.clone()).collect();
        iterations.push(record);

        if cfg.initial_state == InitialStateMode::Chained {
            states = runs.into_iter().map(|r| r.final_state).collect();
        }

        let etas: Option<Vec<Vec<f64>>> = cfg.perturb.then(|| {
            (0..m)
                .map(|j| {
                    let mut r = seeding::stream(cfg.seed, &format!("eki/eta/{it}/{j}"));
                    draw_perturbation(&mut r, target.noise.diag())
                })
                .collect()
        });
        members = eki_update_with(&members, &outputs, &target.mean, target.noise.diag(), etas.as_deref())?;
    }
    let params: Vec<Params> = members.iter().map(|u| priors.from_unconstrained(u, base)).collect();
    iterations.push(IterationRecord::new(cfg.max_iter, params, &members, cfg.collapse_tol, truth));
    Ok(EnsembleRecord {
        names: priors.names(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_ensemble(rng: &mut ChaCha8Rng, m: usize, p: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn collapsed_ensemble_is_unchanged() {
        let members = vec![vec![1.0, 2.0]; 5];
        let outputs = vec![vec![0.5, 0.5, 0.5]; 5];
        let out = eki_update_with(&members, &outputs, &[3.0, 3.0, 3.0], &[1.0; 3], None).unwrap();
        assert_eq!(out, members);
    }

    #[test]
    fn outputs_on_target_give_zero_increments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let members = gaussian_ensemble(&mut rng, 6, 3);
        let target = vec![0.2, -0.1];
        let outputs = vec![target.clone(); 6];
        let out = eki_update_with(&members, &outputs, &target, &[0.3, 0.3], None).unwrap();
        assert_eq!(out, members);
    }

    #[test]
    fn scalar_update_matches_hand_computation() {
        // two members, identity forward model, unit noise
        let members = vec![vec![0.0], vec![2.0]];
        let outputs = members.clone();
        let out = eki_update_with(&members, &outputs, &[4.0], &[1.0], None).unwrap();
        // var = 1, gain = 1 / (1 + 1)
        assert!((out[0][0] - 2.0).abs() < 1e-14 && (out[1][0] - 3.0).abs() < 1e-14, "{out:?}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = vec![vec![0.0]];
        assert!(eki_update_with(&m, &m, &[0.0], &[1.0], None).is_err());
        let m = vec![vec![0.0], vec![1.0]];
        let w = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(eki_update_with(&m, &w, &[0.0], &[1.0], None).is_err());
        assert!(EkiConfig {
            ensemble_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn perturbed_update_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let members = gaussian_ensemble(&mut rng, 8, 2);
        let outputs: Vec<Vec<f64>> = members.iter().map(|t| vec![t[0] + t[1], t[0] - t[1], 2.0 * t[0]]).collect();
        let a = eki_update(&members, &outputs, &[1.0, 0.0, 1.0], &[0.1; 3], &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        let b = eki_update(&members, &outputs, &[1.0, 0.0, 1.0], &[0.1; 3], &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        let c = eki_update(&members, &outputs, &[1.0, 0.0, 1.0], &[0.1; 3], &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
