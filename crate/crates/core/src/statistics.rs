//! Moment functions, running time averages and control-run estimates.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    integrate, integrate_fast, DynamicsError, FastState, IntegratorConfig, ModelState, Params, SystemShape,
};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("negative accumulation weight {0}")]
    NegativeWeight(f64),
    #[error("layouts differ: {0:?} vs {1:?}")]
    LayoutMismatch(MomentLayout, MomentLayout),
    #[error("bad moment label `{0}`")]
    Label(String),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
    #[error("statistic requires the full layout")]
    NotFull,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which moment vector is accumulated, and its entry order.
///
/// Full: blocks `X_k`, `Ybar_k`, `X_k^2`, `X_k Ybar_k`, `mean_j Y_{j,k}^2`, each of
/// length `K`. Fast: `Y_j` for every `j`, then `Y_j Y_jp` for `j <= jp` in
/// row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum MomentLayout {
    Full { shape: SystemShape },
    Fast { n_fast: usize },
}

const FULL_BLOCKS: [&str; 5] = ["X", "Ybar", "X2", "XYbar", "Y2bar"];

impl MomentLayout {
    pub fn full(shape: SystemShape) -> Self {
        MomentLayout::Full { shape }
    }

    pub fn fast(n_fast: usize) -> Self {
        MomentLayout::Fast { n_fast }
    }

    pub fn len(&self) -> usize {
        match *self {
            MomentLayout::Full { shape } => 5 * shape.n_slow,
            MomentLayout::Fast { n_fast } => n_fast + n_fast * (n_fast + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Header label of entry `i`, with one-based indices.
    pub fn label(&self, i: usize) -> String {
        match *self {
            MomentLayout::Full { shape } => {
                let k = shape.n_slow;
                format!("{}[{}]", FULL_BLOCKS[i / k], i % k + 1)
            }
            MomentLayout::Fast { n_fast } => {
                if i < n_fast {
                    format!("Y[{}]", i + 1)
                } else {
                    let (j, jp) = upper_pair(n_fast, i - n_fast);
                    format!("YY[{},{}]", j + 1, jp + 1)
                }
            }
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        let (name, rest) = label.split_once('[')?;
        let inner = rest.strip_suffix(']')?;
        match *self {
            MomentLayout::Full { shape } => {
                let block = FULL_BLOCKS.iter().position(|b| *b == name)?;
                let k: usize = inner.parse().ok()?;
                (1..=shape.n_slow).contains(&k).then(|| block * shape.n_slow + k - 1)
            }
            MomentLayout::Fast { n_fast } => match name {
                "Y" => {
                    let j: usize = inner.parse().ok()?;
                    (1..=n_fast).contains(&j).then(|| j - 1)
                }
                "YY" => {
                    let (a, b) = inner.split_once(',')?;
                    let (j, jp): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                    if j == 0 || j > jp || jp > n_fast {
                        return None;
                    }
                    Some(n_fast + pair_offset(n_fast, j - 1, jp - 1))
                }
                _ => None,
            },
        }
    }

    /// Recover a layout from a header row.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self, StatsError> {
        let first = labels.first().map(|s| s.as_ref()).unwrap_or("");
        let layout = if first.starts_with("X[") {
            if labels.len() % 5 != 0 {
                return Err(StatsError::Label(first.to_string()));
            }
            // the fast count is not recorded in the full layout labels; any valid J works
            let shape = SystemShape::new(labels.len() / 5, 4).map_err(|_| StatsError::Label(first.to_string()))?;
            MomentLayout::Full { shape }
        } else if first.starts_with("Y[") {
            let n_fast = labels.iter().take_while(|l| l.as_ref().starts_with("Y[")).count();
            MomentLayout::Fast { n_fast }
        } else {
            return Err(StatsError::Label(first.to_string()));
        };
        if layout.len() != labels.len() {
            return Err(StatsError::Length {
                expected: layout.len(),
                got: labels.len(),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if layout.index_of(l.as_ref()) != Some(i) {
                return Err(StatsError::Label(l.as_ref().to_string()));
            }
        }
        Ok(layout)
    }

    fn check(&self, got: usize) -> Result<(), StatsError> {
        if got != self.len() {
            return Err(StatsError::Length {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

fn pair_offset(n: usize, j: usize, jp: usize) -> usize {
    // rows 0..j hold n, n-1, ..., n-j+1 entries
    j * n - j * (j.saturating_sub(1)) / 2 + (jp - j)
}

fn upper_pair(n: usize, mut idx: usize) -> (usize, usize) {
    let mut j = 0;
    while idx >= n - j {
        idx -= n - j;
        j += 1;
    }
    (j, j + idx)
}

/// Instantaneous full-layout moments into `out` (length `5K`).
pub fn moment_full_into(shape: SystemShape, slow: &[f64], fast: &[f64], out: &mut [f64]) {
    let k = shape.n_slow;
    let j = shape.n_fast;
    let inv_j = 1.0 / j as f64;
    for idx in 0..k {
        let x = slow[idx];
        let col = &fast[idx * j..(idx + 1) * j];
        let (s, s2) = col.iter().fold((0.0, 0.0), |(a, b), &y| (a + y, b + y * y));
        let ybar = s * inv_j;
        out[idx] = x;
        out[k + idx] = ybar;
        out[2 * k + idx] = x * x;
        out[3 * k + idx] = x * ybar;
        out[4 * k + idx] = s2 * inv_j;
    }
}

/// Instantaneous fast-layout moments into `out`.
pub fn moment_fast_into(column: &[f64], out: &mut [f64]) {
    let n = column.len();
    out[..n].copy_from_slice(column);
    let mut i = n;
    for a in 0..n {
        let ya = column[a];
        for &yb in &column[a..] {
            out[i] = ya * yb;
            i += 1;
        }
    }
}

pub fn moment_f(state: &ModelState) -> Vec<f64> {
    let shape = state.shape();
    let mut out = vec![0.0; 5 * shape.n_slow];
    moment_full_into(shape, state.slow(), state.fast(), &mut out);
    out
}

pub fn moment_g(column: &[f64]) -> Vec<f64> {
    let n = column.len();
    let mut out = vec![0.0; MomentLayout::fast(n).len()];
    moment_fast_into(column, &mut out);
    out
}

/// Weighted running average of moment samples over a time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningAverage {
    layout: MomentLayout,
    /// Window start in days.
    pub t0: f64,
    elapsed: f64,
    sum: Vec<f64>,
    /// Running mean and weighted sum of squared deviations, when variance is tracked.
    second: Option<(Vec<f64>, Vec<f64>)>,
}

impl RunningAverage {
    pub fn new(layout: MomentLayout, t0: f64) -> Self {
        Self {
            layout,
            t0,
            elapsed: 0.0,
            sum: vec![0.0; layout.len()],
            second: None,
        }
    }

    /// An accumulator that also estimates per-entry variances.
    pub fn with_variance(layout: MomentLayout, t0: f64) -> Self {
        let n = layout.len();
        Self {
            second: Some((vec![0.0; n], vec![0.0; n])),
            ..Self::new(layout, t0)
        }
    }

    pub fn layout(&self) -> MomentLayout {
        self.layout
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn accumulate(&mut self, sample: &[f64], weight: f64) -> Result<(), StatsError> {
        self.layout.check(sample.len())?;
        if weight < 0.0 || weight.is_nan() {
            return Err(StatsError::NegativeWeight(weight));
        }
        self.push(sample, weight);
        Ok(())
    }

    /// Unchecked accumulation for the integration hot loop.
    #[inline]
    pub(crate) fn push(&mut self, sample: &[f64], weight: f64) {
        let total = self.elapsed + weight;
        if let Some((mean, m2)) = self.second.as_mut() {
            if total > 0.0 {
                let frac = weight / total;
                for ((m, q), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(sample) {
                    let delta = x - *m;
                    *m += frac * delta;
                    *q += weight * delta * (x - *m);
                }
            }
        }
        for (s, &x) in self.sum.iter_mut().zip(sample) {
            *s += weight * x;
        }
        self.elapsed = total;
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.elapsed <= 0.0 {
            return None;
        }
        Some(self.sum.iter().map(|s| s / self.elapsed).collect())
    }

    /// Weighted population variance of the samples, if tracked.
    pub fn variance(&self) -> Option<Vec<f64>> {
        if self.elapsed <= 0.0 {
            return None;
        }
        let (_, m2) = self.second.as_ref()?;
        Some(m2.iter().map(|q| (q / self.elapsed).max(0.0)).collect())
    }

    /// Combine with an accumulator over an adjacent window.
    pub fn merge(&mut self, other: &RunningAverage) -> Result<(), StatsError> {
        if self.layout != other.layout {
            return Err(StatsError::LayoutMismatch(self.layout, other.layout));
        }
        let total = self.elapsed + other.elapsed;
        match (self.second.as_mut(), other.second.as_ref()) {
            (Some((ma, qa)), Some((mb, qb))) if total > 0.0 => {
                let (wa, wb) = (self.elapsed, other.elapsed);
                for i in 0..ma.len() {
                    let delta = mb[i] - ma[i];
                    qa[i] += qb[i] + delta * delta * wa * wb / total;
                    ma[i] += delta * wb / total;
                }
            }
            (Some(_), Some(_)) => {}
            _ => self.second = None,
        }
        for (s, o) in self.sum.iter_mut().zip(&other.sum) {
            *s += o;
        }
        self.t0 = self.t0.min(other.t0);
        self.elapsed = total;
        Ok(())
    }
}

/// A model whose trajectories produce a moment vector: either the full system
/// or a single fast column with the slow variable held fixed.
pub trait ForwardModel: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn layout(&self) -> MomentLayout;

    /// Generic random initial condition.
    fn initial_state(&self, seed: u64) -> Self::State;

    /// Integrate for `duration` days, feeding every post-step moment sample
    /// (weight `dt`) into `avg`. Returns the final state.
    fn accumulate(
        &self,
        params: &Params,
        state: &Self::State,
        duration: f64,
        cfg: &IntegratorConfig,
        avg: &mut RunningAverage,
    ) -> Result<Self::State, DynamicsError>;

    /// Time-averaged moments over `window` days from `state`.
    fn time_average(
        &self,
        params: &Params,
        state: &Self::State,
        window: f64,
        cfg: &IntegratorConfig,
    ) -> Result<(Vec<f64>, Self::State), DynamicsError> {
        let mut avg = RunningAverage::new(self.layout(), 0.0);
        let end = self.accumulate(params, state, window, cfg, &mut avg)?;
        let mean = avg.mean().unwrap_or_else(|| vec![0.0; self.layout().len()]);
        Ok((mean, end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullModel {
    pub shape: SystemShape,
}

impl ForwardModel for FullModel {
    type State = ModelState;

    fn layout(&self) -> MomentLayout {
        MomentLayout::full(self.shape)
    }

    fn initial_state(&self, seed: u64) -> ModelState {
        ModelState::random(self.shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn accumulate(
        &self,
        params: &Params,
        state: &ModelState,
        duration: f64,
        cfg: &IntegratorConfig,
        avg: &mut RunningAverage,
    ) -> Result<ModelState, DynamicsError> {
        let shape = self.shape;
        let mut buf = vec![0.0; 5 * shape.n_slow];
        let dt = cfg.dt;
        integrate(state, params, duration, cfg, |s| {
            moment_full_into(shape, s.slow(), s.fast(), &mut buf);
            avg.push(&buf, dt);
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastModel {
    pub n_fast: usize,
    /// Value at which the slow variable is held.
    pub slow_value: f64,
}

impl ForwardModel for FastModel {
    type State = FastState;

    fn layout(&self) -> MomentLayout {
        MomentLayout::fast(self.n_fast)
    }

    fn initial_state(&self, seed: u64) -> FastState {
        FastState::random(self.n_fast, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn accumulate(
        &self,
        params: &Params,
        state: &FastState,
        duration: f64,
        cfg: &IntegratorConfig,
        avg: &mut RunningAverage,
    ) -> Result<FastState, DynamicsError> {
        let mut buf = vec![0.0; self.layout().len()];
        let dt = cfg.dt;
        integrate_fast(state, params, self.slow_value, duration, cfg, |y| {
            moment_fast_into(y, &mut buf);
            avg.push(&buf, dt);
        })
    }
}

/// Long-run means and variances of the instantaneous moments at fixed parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlRun<S> {
    pub layout: MomentLayout,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub duration: f64,
    /// States sampled along the run, usable as steady-state initial conditions.
    pub snapshots: Vec<S>,
    pub final_state: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPlan {
    /// Days between stored states.
    pub interval: f64,
    /// No states are stored before this many days have elapsed.
    pub after: f64,
}

/// Integrate `model` at `params` for `duration` days from a seeded initial state,
/// estimating per-entry means and variances of the moment function.
pub fn control_run_variances<M: ForwardModel>(
    model: &M,
    params: &Params,
    duration: f64,
    cfg: &IntegratorConfig,
    seed: u64,
    snapshots: Option<SnapshotPlan>,
) -> Result<ControlRun<M::State>, StatsError> {
    if !(duration > 0.0) {
        return Err(StatsError::Duration(duration));
    }
    let layout = model.layout();
    let mut avg = RunningAverage::with_variance(layout, 0.0);
    let mut state = model.initial_state(seed);
    let mut stored = Vec::new();
    match snapshots {
        Some(plan) if plan.interval > 0.0 => {
            let n_steps = cfg.steps_for(duration);
            let per_segment = cfg.steps_for(plan.interval).max(1);
            let mut done = 0u64;
            while done < n_steps {
                let len = per_segment.min(n_steps - done);
                state = model.accumulate(params, &state, len as f64 * cfg.dt, cfg, &mut avg)?;
                done += len;
                if done as f64 * cfg.dt >= plan.after && len == per_segment {
                    stored.push(state.clone());
                }
            }
        }
        _ => {
            state = model.accumulate(params, &state, duration, cfg, &mut avg)?;
        }
    }
    Ok(ControlRun {
        layout,
        mean: avg.mean().expect("positive duration"),
        variance: avg.variance().expect("variance tracked"),
        duration: avg.elapsed(),
        snapshots: stored,
        final_state: state,
    })
}

/// Average per-entry variances over statistically interchangeable entries:
/// over `k` within each block for the full layout, over `j` for fast first
/// moments and over equal cyclic lag for fast second moments.
pub fn pool_variances(layout: &MomentLayout, variance: &[f64]) -> Result<Vec<f64>, StatsError> {
    layout.check(variance.len())?;
    let mut out = vec![0.0; variance.len()];
    match *layout {
        MomentLayout::Full { shape } => {
            let k = shape.n_slow;
            for block in 0..5 {
                let s = &variance[block * k..(block + 1) * k];
                let m = s.iter().sum::<f64>() / k as f64;
                out[block * k..(block + 1) * k].fill(m);
            }
        }
        MomentLayout::Fast { n_fast: n } => {
            let m = variance[..n].iter().sum::<f64>() / n as f64;
            out[..n].fill(m);
            let lag_of = |i: usize| {
                let (j, jp) = upper_pair(n, i);
                (jp - j).min(n - (jp - j))
            };
            let mut sums = vec![(0.0, 0usize); n / 2 + 1];
            for i in 0..n * (n + 1) / 2 {
                let e = &mut sums[lag_of(i)];
                e.0 += variance[n + i];
                e.1 += 1;
            }
            for i in 0..n * (n + 1) / 2 {
                let (s, c) = sums[lag_of(i)];
                out[n + i] = s / c as f64;
            }
        }
    }
    Ok(out)
}

/// The five k-pooled block means `(X, Ybar, X2, XYbar, Y2bar)` of a full-layout vector.
pub fn pooled_block_means(layout: &MomentLayout, means: &[f64]) -> Result<[f64; 5], StatsError> {
    let MomentLayout::Full { shape } = *layout else {
        return Err(StatsError::NotFull);
    };
    layout.check(means.len())?;
    let k = shape.n_slow;
    let mut out = [0.0; 5];
    for (b, o) in out.iter_mut().enumerate() {
        *o = means[b * k..(b + 1) * k].iter().sum::<f64>() / k as f64;
    }
    Ok(out)
}

/// Residuals of the steady-state second-moment balances:
/// `r_slow = <X^2> - F <X> + h c <X Ybar>` and `r_fast = <mean Y^2> - (h/J) <X Ybar>`.
pub fn steady_state_residuals(
    layout: &MomentLayout,
    means: &[f64],
    params: &Params,
) -> Result<(f64, f64), StatsError> {
    let MomentLayout::Full { shape } = *layout else {
        return Err(StatsError::NotFull);
    };
    let [x, _ybar, x2, xybar, y2bar] = pooled_block_means(layout, means)?;
    let h = params.coupling;
    let r_slow = x2 - params.forcing * x + h * params.damping_ratio * xybar;
    let r_fast = y2bar - h / shape.n_fast as f64 * xybar;
    Ok((r_slow, r_fast))
}

/// Relative residuals `|r_slow| / <X^2>` and `|r_fast| / <mean Y^2>`.
pub fn relative_residuals(layout: &MomentLayout, means: &[f64], params: &Params) -> Result<(f64, f64), StatsError> {
    let (rs, rf) = steady_state_residuals(layout, means, params)?;
    let b = pooled_block_means(layout, means)?;
    Ok((rs.abs() / b[2], rf.abs() / b[4]))
}

/// Write vectors as CSV rows under a header of layout labels.
pub fn write_moment_csv<W: Write>(writer: W, layout: &MomentLayout, rows: &[&[f64]]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(layout.labels())?;
    for row in rows {
        layout.check(row.len())?;
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_moment_csv<R: Read>(reader: R) -> Result<(MomentLayout, Vec<Vec<f64>>), StatsError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let layout = MomentLayout::from_labels(&headers)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| StatsError::Label(s.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        layout.check(row.len())?;
        rows.push(row);
    }
    Ok((layout, rows))
}
