//! Two-scale Lorenz-96 dynamics.
//!
//! The system has `n_slow` slow variables `X_k`, each coupled to `n_fast`
//! fast variables `Y_{j,k}`. Both index sets are cyclic, and the fast
//! variables form a single chain of length `n_slow * n_fast`
//! (`Y_{j+J,k} = Y_{j,k+1}`), so the fast block of a [`ModelState`] is
//! stored contiguously with `j` varying fastest.
//!
//! Three vector fields are provided: the full coupled system
//! ([`TwoScale`]), a single fast column driven by a fixed slow value
//! ([`FastColumn`]), and the energy-conserving part of the full system
//! ([`Conservative`]) used to check the integrator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest step size accepted for the default parameter regime.
pub const MAX_STABLE_DT: f64 = 0.005;

/// Default step size in model days.
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid system shape: {0}")]
    Shape(String),
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("integration blew up at step {step} (t = {time} days) with {params}")]
    BlowUp { step: u64, time: f64, params: Params },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemShape {
    pub n_slow: usize,
    pub n_fast: usize,
}

impl SystemShape {
    pub fn new(n_slow: usize, n_fast: usize) -> Result<Self, DynamicsError> {
        if n_slow < 4 || n_fast < 4 {
            return Err(DynamicsError::Shape(format!(
                "need at least 4 slow and 4 fast variables, got K={n_slow}, J={n_fast}"
            )));
        }
        Ok(Self { n_slow, n_fast })
    }

    /// Number of fast variables over the whole chain.
    pub fn fast_len(&self) -> usize {
        self.n_slow * self.n_fast
    }

    /// Length of the flattened state vector.
    pub fn state_len(&self) -> usize {
        self.n_slow + self.fast_len()
    }
}

/// Names of the four model parameters, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamName {
    Forcing,
    Coupling,
    DampingRatio,
    Nonlinearity,
}

impl ParamName {
    pub const ALL: [ParamName; 4] = [
        ParamName::Forcing,
        ParamName::Coupling,
        ParamName::DampingRatio,
        ParamName::Nonlinearity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short label used in file headers.
    pub fn label(self) -> &'static str {
        match self {
            ParamName::Forcing => "F",
            ParamName::Coupling => "h",
            ParamName::DampingRatio => "c",
            ParamName::Nonlinearity => "b",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == label)
    }
}

/// Whether a parameter can be learned from high-resolution simulation alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Computable,
    NonComputable,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Large-scale forcing `F`.
    pub forcing: f64,
    /// Slow-fast interaction coefficient `h`.
    pub coupling: f64,
    /// Ratio of fast to slow damping rates `c`.
    pub damping_ratio: f64,
    /// Amplitude of the fast nonlinearity `b`.
    pub nonlinearity: f64,
    #[serde(default)]
    pub roles: [ParamRole; 4],
}

impl Params {
    pub fn new(forcing: f64, coupling: f64, damping_ratio: f64, nonlinearity: f64) -> Self {
        Self {
            forcing,
            coupling,
            damping_ratio,
            nonlinearity,
            roles: [ParamRole::Unspecified; 4],
        }
    }

    /// The canonical parameter set `(F, h, c, b) = (10, 1, 10, 10)`.
    pub fn reference() -> Self {
        Self::new(10.0, 1.0, 10.0, 10.0)
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.forcing, self.coupling, self.damping_ratio, self.nonlinearity]
    }

    pub fn get(&self, name: ParamName) -> f64 {
        self.to_array()[name.index()]
    }

    pub fn set(&mut self, name: ParamName, value: f64) {
        match name {
            ParamName::Forcing => self.forcing = value,
            ParamName::Coupling => self.coupling = value,
            ParamName::DampingRatio => self.damping_ratio = value,
            ParamName::Nonlinearity => self.nonlinearity = value,
        }
    }

    pub fn with(mut self, name: ParamName, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn role(&self, name: ParamName) -> ParamRole {
        self.roles[name.index()]
    }

    pub fn with_role(mut self, name: ParamName, role: ParamRole) -> Self {
        self.roles[name.index()] = role;
        self
    }
}

impl std::fmt::Display for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(F={}, h={}, c={}, b={})",
            self.forcing, self.coupling, self.damping_ratio, self.nonlinearity
        )
    }
}

/// Full-system state: slow block followed by the fast chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    shape: SystemShape,
    data: Vec<f64>,
    /// Elapsed model time in days.
    pub time: f64,
}

impl ModelState {
    pub fn zeros(shape: SystemShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.state_len()],
            time: 0.0,
        }
    }

    pub fn from_parts(shape: SystemShape, slow: &[f64], fast: &[f64]) -> Result<Self, DynamicsError> {
        if slow.len() != shape.n_slow || fast.len() != shape.fast_len() {
            return Err(DynamicsError::Shape(format!(
                "expected {} slow and {} fast values, got {} and {}",
                shape.n_slow,
                shape.fast_len(),
                slow.len(),
                fast.len()
            )));
        }
        let mut data = Vec::with_capacity(shape.state_len());
        data.extend_from_slice(slow);
        data.extend_from_slice(fast);
        Ok(Self { shape, data, time: 0.0 })
    }

    /// Generic initial condition: unit-normal slow variables, fast variables at rest.
    pub fn random<R: Rng + ?Sized>(shape: SystemShape, rng: &mut R) -> Self {
        let mut state = Self::zeros(shape);
        for x in state.slow_mut() {
            *x = rng.sample(StandardNormal);
        }
        state
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn slow(&self) -> &[f64] {
        &self.data[..self.shape.n_slow]
    }

    pub fn fast(&self) -> &[f64] {
        &self.data[self.shape.n_slow..]
    }

    pub fn slow_mut(&mut self) -> &mut [f64] {
        let k = self.shape.n_slow;
        &mut self.data[..k]
    }

    pub fn fast_mut(&mut self) -> &mut [f64] {
        let k = self.shape.n_slow;
        &mut self.data[k..]
    }

    /// `Y_{j,k}` with zero-based indices.
    pub fn y(&self, j: usize, k: usize) -> f64 {
        self.fast()[k * self.shape.n_fast + j]
    }

    /// Mean of the fast variables attached to slow variable `k`.
    pub fn fast_mean(&self, k: usize) -> f64 {
        let j = self.shape.n_fast;
        self.fast()[k * j..(k + 1) * j].iter().sum::<f64>() / j as f64
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `sum_k (X_k^2 + sum_j Y_{j,k}^2)`.
    pub fn total_energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn check_shape(&self, shape: SystemShape) -> Result<(), DynamicsError> {
        if self.shape != shape || self.data.len() != shape.state_len() {
            return Err(DynamicsError::Shape(format!(
                "state has shape {:?}, expected {:?}",
                self.shape, shape
            )));
        }
        Ok(())
    }
}

/// A single cyclic chain of fast variables driven by a fixed slow value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastState {
    pub values: Vec<f64>,
    pub time: f64,
}

impl FastState {
    pub fn new(values: Vec<f64>) -> Result<Self, DynamicsError> {
        if values.len() < 4 {
            return Err(DynamicsError::Shape(format!(
                "fast chain needs at least 4 variables, got {}",
                values.len()
            )));
        }
        Ok(Self { values, time: 0.0 })
    }

    /// Unit-normal fast variables. A state at rest would stay symmetric forever
    /// under uniform forcing.
    pub fn random<R: Rng + ?Sized>(n_fast: usize, rng: &mut R) -> Self {
        Self {
            values: (0..n_fast).map(|_| rng.sample(StandardNormal)).collect(),
            time: 0.0,
        }
    }
}

/// Right-hand side of an autonomous ODE on a flat vector.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, u: &[f64], du: &mut [f64]);
}

/// `out[k] = -x[k-1] (x[k-2] - x[k+1]) - x[k]` on a cyclic chain.
#[inline]
fn slow_advection(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert!(n >= 4);
    out[0] = -x[n - 1] * (x[n - 2] - x[1]) - x[0];
    out[1] = -x[0] * (x[n - 1] - x[2]) - x[1];
    let inner = out[2..n - 1].iter_mut();
    for ((((o, &xm2), &xm1), &x0), &xp1) in inner.zip(&x[0..n - 3]).zip(&x[1..n - 2]).zip(&x[2..n - 1]).zip(&x[3..n]) {
        *o = -xm1 * (xm2 - xp1) - x0;
    }
    out[n - 1] = -x[n - 2] * (x[n - 3] - x[0]) - x[n - 1];
}

/// `out[i] = -b y[i+1] (y[i+2] - y[i-1]) - y[i]` on a cyclic chain.
#[inline]
fn fast_advection(y: &[f64], b: f64, out: &mut [f64]) {
    let n = y.len();
    debug_assert!(n >= 4);
    out[0] = -b * y[1] * (y[2] - y[n - 1]) - y[0];
    let inner = out[1..n - 2].iter_mut();
    for ((((o, &ym1), &y0), &yp1), &yp2) in inner.zip(&y[0..n - 3]).zip(&y[1..n - 2]).zip(&y[2..n - 1]).zip(&y[3..n]) {
        *o = -b * yp1 * (yp2 - ym1) - y0;
    }
    out[n - 2] = -b * y[n - 1] * (y[0] - y[n - 3]) - y[n - 2];
    out[n - 1] = -b * y[0] * (y[1] - y[n - 2]) - y[n - 1];
}

/// The full coupled system.
#[derive(Debug, Clone, Copy)]
pub struct TwoScale {
    pub shape: SystemShape,
    pub params: Params,
}

impl VectorField for TwoScale {
    fn dim(&self) -> usize {
        self.shape.state_len()
    }

    fn eval(&self, u: &[f64], du: &mut [f64]) {
        let SystemShape { n_slow, n_fast } = self.shape;
        let Params {
            forcing: f,
            coupling: h,
            damping_ratio: c,
            nonlinearity: b,
            ..
        } = self.params;
        let (x, y) = u.split_at(n_slow);
        let (dx, dy) = du.split_at_mut(n_slow);

        slow_advection(x, dx);
        let hc_over_j = h * c / n_fast as f64;
        for k in 0..n_slow {
            let ysum: f64 = y[k * n_fast..(k + 1) * n_fast].iter().sum();
            dx[k] += f - hc_over_j * ysum;
        }

        fast_advection(y, b, dy);
        let h_over_j = h / n_fast as f64;
        for k in 0..n_slow {
            let drive = h_over_j * x[k];
            for v in &mut dy[k * n_fast..(k + 1) * n_fast] {
                *v = c * (*v + drive);
            }
        }
    }
}

/// One fast column with the slow variable held at a constant.
#[derive(Debug, Clone, Copy)]
pub struct FastColumn {
    pub n_fast: usize,
    pub params: Params,
    pub slow_value: f64,
}

impl VectorField for FastColumn {
    fn dim(&self) -> usize {
        self.n_fast
    }

    fn eval(&self, u: &[f64], du: &mut [f64]) {
        let Params {
            coupling: h,
            damping_ratio: c,
            nonlinearity: b,
            ..
        } = self.params;
        fast_advection(u, b, du);
        let drive = h / self.n_fast as f64 * self.slow_value;
        for v in du.iter_mut() {
            *v = c * (*v + drive);
        }
    }
}

/// Advective and coupling terms of [`TwoScale`] only: no damping, no forcing.
/// `sign` multiplies the coupling feedback onto the slow variables; it is `1.0`
/// except in mutation tests of the conservation check.
#[derive(Debug, Clone, Copy)]
pub struct Conservative {
    pub shape: SystemShape,
    pub params: Params,
    pub sign: f64,
}

impl Conservative {
    pub fn new(shape: SystemShape, params: Params) -> Self {
        Self { shape, params, sign: 1.0 }
    }
}

impl VectorField for Conservative {
    fn dim(&self) -> usize {
        self.shape.state_len()
    }

    fn eval(&self, u: &[f64], du: &mut [f64]) {
        let SystemShape { n_slow, n_fast } = self.shape;
        let Params {
            coupling: h,
            damping_ratio: c,
            nonlinearity: b,
            ..
        } = self.params;
        let (x, y) = u.split_at(n_slow);
        let (dx, dy) = du.split_at_mut(n_slow);

        slow_advection(x, dx);
        let hc_over_j = self.sign * h * c / n_fast as f64;
        for k in 0..n_slow {
            let ysum: f64 = y[k * n_fast..(k + 1) * n_fast].iter().sum();
            // undo the damping term folded into slow_advection
            dx[k] += x[k] - hc_over_j * ysum;
        }

        fast_advection(y, b, dy);
        let h_over_j = h / n_fast as f64;
        for k in 0..n_slow {
            let drive = h_over_j * x[k];
            for (i, v) in dy[k * n_fast..(k + 1) * n_fast].iter_mut().enumerate() {
                *v = c * (*v + y[k * n_fast + i] + drive);
            }
        }
    }
}

/// Time derivative of a [`ModelState`] under the full system.
pub fn full_tendency(state: &ModelState, params: &Params, shape: SystemShape) -> Result<ModelState, DynamicsError> {
    state.check_shape(shape)?;
    let mut out = ModelState::zeros(shape);
    TwoScale { shape, params: *params }.eval(&state.data, &mut out.data);
    out.time = state.time;
    Ok(out)
}

/// Time derivative of a single fast chain with the slow variable fixed.
pub fn fast_tendency(column: &[f64], params: &Params, slow_value: f64) -> Result<Vec<f64>, DynamicsError> {
    if column.len() < 4 {
        return Err(DynamicsError::Shape(format!(
            "fast chain needs at least 4 variables, got {}",
            column.len()
        )));
    }
    let mut out = vec![0.0; column.len()];
    FastColumn {
        n_fast: column.len(),
        params: *params,
        slow_value,
    }
    .eval(column, &mut out);
    Ok(out)
}

/// Time derivative under [`Conservative`].
pub fn conservative_tendency(state: &ModelState, params: &Params) -> ModelState {
    let shape = state.shape;
    let mut out = ModelState::zeros(shape);
    Conservative::new(shape, *params).eval(&state.data, &mut out.data);
    out.time = state.time;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            scheme: Scheme::Rk4,
        }
    }
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> Result<Self, DynamicsError> {
        let cfg = Self { dt, scheme: Scheme::Rk4 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.dt > MAX_STABLE_DT {
            return Err(DynamicsError::Config(format!(
                "dt = {} exceeds the stability guard {MAX_STABLE_DT}",
                self.dt
            )));
        }
        Ok(())
    }

    /// Number of steps needed to cover `duration` days.
    pub fn steps_for(&self, duration: f64) -> u64 {
        if duration <= 0.0 {
            return 0;
        }
        // tolerate representation error in duration / dt
        (duration / self.dt - 1e-6).ceil().max(0.0) as u64
    }
}

/// Classical fourth-order Runge-Kutta with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    pub fn step<F: VectorField>(&mut self, field: &F, u: &mut [f64], dt: f64) {
        let half = 0.5 * dt;
        field.eval(u, &mut self.k1);
        for ((t, &a), &k) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k1) {
            *t = a + half * k;
        }
        field.eval(&self.tmp, &mut self.k2);
        for ((t, &a), &k) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k2) {
            *t = a + half * k;
        }
        field.eval(&self.tmp, &mut self.k3);
        for ((t, &a), &k) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k3) {
            *t = a + dt * k;
        }
        field.eval(&self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for ((((v, &a), &b), &c), &d) in u.iter_mut().zip(&self.k1).zip(&self.k2).zip(&self.k3).zip(&self.k4) {
            *v += sixth * (a + 2.0 * (b + c) + d);
        }
    }
}

// A non-finite entry poisons its lane sum; four lanes keep the loop vectorizable.
#[inline]
fn all_finite(values: &[f64]) -> bool {
    let mut lanes = [0.0f64; 4];
    let chunks = values.chunks_exact(4);
    let rest: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l += v;
        }
    }
    (lanes[0] + lanes[1] + lanes[2] + lanes[3] + rest).is_finite()
}

/// Advance `values` by `n_steps` steps, calling `observer` after each one.
pub fn run_field<F, O>(
    field: &F,
    values: &mut [f64],
    time: &mut f64,
    n_steps: u64,
    cfg: &IntegratorConfig,
    params: &Params,
    mut observer: O,
) -> Result<(), DynamicsError>
where
    F: VectorField,
    O: FnMut(&[f64], f64),
{
    cfg.validate()?;
    let mut rk = Rk4::new(field.dim());
    let t0 = *time;
    for n in 1..=n_steps {
        rk.step(field, values, cfg.dt);
        *time = t0 + n as f64 * cfg.dt;
        if !all_finite(values) {
            return Err(DynamicsError::BlowUp {
                step: n,
                time: *time,
                params: *params,
            });
        }
        observer(values, *time);
    }
    Ok(())
}

/// Advance the full system by one step.
pub fn step(state: &ModelState, params: &Params, cfg: &IntegratorConfig) -> Result<ModelState, DynamicsError> {
    let mut next = state.clone();
    let field = TwoScale {
        shape: state.shape,
        params: *params,
    };
    run_field(&field, &mut next.data, &mut next.time, 1, cfg, params, |_, _| {})?;
    Ok(next)
}

/// Integrate the full system for `duration` days, observing every post-step state.
pub fn integrate<O>(
    state0: &ModelState,
    params: &Params,
    duration: f64,
    cfg: &IntegratorConfig,
    mut observer: O,
) -> Result<ModelState, DynamicsError>
where
    O: FnMut(&ModelState),
{
    if duration < 0.0 || !duration.is_finite() {
        return Err(DynamicsError::Config(format!("duration must be >= 0, got {duration}")));
    }
    let mut state = state0.clone();
    let field = TwoScale {
        shape: state.shape,
        params: *params,
    };
    let shape = state.shape;
    let n = cfg.steps_for(duration);
    let mut time = state.time;
    let mut view = ModelState::zeros(shape);
    run_field(&field, &mut state.data, &mut time, n, cfg, params, |u, t| {
        view.data.copy_from_slice(u);
        view.time = t;
        observer(&view);
    })?;
    state.time = time;
    Ok(state)
}

/// Integrate a single fast column for `duration` days.
pub fn integrate_fast<O>(
    state0: &FastState,
    params: &Params,
    slow_value: f64,
    duration: f64,
    cfg: &IntegratorConfig,
    mut observer: O,
) -> Result<FastState, DynamicsError>
where
    O: FnMut(&[f64]),
{
    if duration < 0.0 || !duration.is_finite() {
        return Err(DynamicsError::Config(format!("duration must be >= 0, got {duration}")));
    }
    let mut state = state0.clone();
    let field = FastColumn {
        n_fast: state.values.len(),
        params: *params,
        slow_value,
    };
    let n = cfg.steps_for(duration);
    run_field(&field, &mut state.values, &mut state.time, n, cfg, params, |u, _| observer(u))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(k: usize, j: usize) -> SystemShape {
        SystemShape::new(k, j).unwrap()
    }

    fn filled(shape: SystemShape, x: f64, y: f64) -> ModelState {
        ModelState::from_parts(shape, &vec![x; shape.n_slow], &vec![y; shape.fast_len()]).unwrap()
    }

    #[test]
    fn rejects_small_shapes() {
        assert!(SystemShape::new(3, 10).is_err());
        assert!(SystemShape::new(36, 3).is_err());
    }

    #[test]
    fn zero_state_feels_only_forcing() {
        let s = shape(36, 10);
        let d = full_tendency(&ModelState::zeros(s), &Params::reference(), s).unwrap();
        assert!(d.slow().iter().all(|&v| v == 10.0));
        assert!(d.fast().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_state_tendency() {
        let s = shape(36, 10);
        let d = full_tendency(&filled(s, 1.0, 0.5), &Params::reference(), s).unwrap();
        for &v in d.slow() {
            assert_relative_eq!(v, 4.0, epsilon = 1e-12);
        }
        for &v in d.fast() {
            assert_relative_eq!(v, -4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = shape(8, 4);
        let state = ModelState::zeros(shape(9, 4));
        assert!(matches!(
            full_tendency(&state, &Params::reference(), s),
            Err(DynamicsError::Shape(_))
        ));
    }

    #[test]
    fn fast_column_examples() {
        let p = Params::reference();
        let d = fast_tendency(&[0.0; 10], &p, 2.556).unwrap();
        for v in d {
            assert_relative_eq!(v, 2.556, epsilon = 1e-12);
        }
        let d = fast_tendency(&[0.5; 10], &p, 0.0).unwrap();
        for v in d {
            assert_relative_eq!(v, -5.0, epsilon = 1e-12);
        }
        assert!(fast_tendency(&[0.0; 3], &p, 0.0).is_err());
    }

    #[test]
    fn conservative_zero_state() {
        let s = shape(8, 4);
        let d = conservative_tendency(&ModelState::zeros(s), &Params::reference());
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conservative_energy_derivative_vanishes() {
        let s = shape(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut st = ModelState::random(s, &mut rng);
            for y in st.fast_mut() {
                *y = rng.gen_range(-1.0..1.0);
            }
            let d = conservative_tendency(&st, &Params::new(7.0, 0.7, 3.0, 4.0));
            let de: f64 = st.as_slice().iter().zip(d.as_slice()).map(|(u, v)| 2.0 * u * v).sum();
            let scale: f64 = st.as_slice().iter().zip(d.as_slice()).map(|(u, v)| (u * v).abs()).sum();
            assert!(de.abs() < 1e-12 * scale.max(1.0), "dE/dt = {de}");
        }
    }

    #[test]
    fn step_constant_tendency_limit() {
        // from rest the first step is dominated by forcing: X(dt) = F dt + O(dt^2)
        let s = shape(8, 4);
        let cfg = IntegratorConfig::new(1e-3).unwrap();
        let next = step(&ModelState::zeros(s), &Params::reference(), &cfg).unwrap();
        for &x in next.slow() {
            assert_relative_eq!(x, 10.0 * 1e-3, max_relative = 1e-3);
        }
        assert_relative_eq!(next.time, 1e-3);
    }

    #[test]
    fn step_is_deterministic() {
        let s = shape(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = ModelState::random(s, &mut rng);
        let cfg = IntegratorConfig::default();
        let a = step(&st, &Params::reference(), &cfg).unwrap();
        let b = step(&st, &Params::reference(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_duration_is_a_noop() {
        let s = shape(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = ModelState::random(s, &mut rng);
        let mut calls = 0;
        let out = integrate(&st, &Params::reference(), 0.0, &IntegratorConfig::default(), |_| calls += 1).unwrap();
        assert_eq!(out, st);
        assert_eq!(calls, 0);
    }

    #[test]
    fn integrate_counts_steps() {
        let s = shape(8, 4);
        let st = ModelState::zeros(s);
        let mut calls = 0u64;
        let cfg = IntegratorConfig::new(1e-3).unwrap();
        let out = integrate(&st, &Params::reference(), 0.1, &cfg, |_| calls += 1).unwrap();
        assert_eq!(calls, 100);
        assert_relative_eq!(out.time, 0.1, epsilon = 1e-12);
        assert_eq!(cfg.steps_for(100.0), 100_000);
        assert_eq!(cfg.steps_for(0.0105), 11);
    }

    #[test]
    fn integrator_config_guards() {
        assert!(IntegratorConfig::new(0.0).is_err());
        assert!(IntegratorConfig::new(-1e-3).is_err());
        assert!(IntegratorConfig::new(0.01).is_err());
        assert!(IntegratorConfig::new(f64::NAN).is_err());
        assert!(IntegratorConfig::new(0.005).is_ok());
    }

    #[test]
    fn blow_up_is_reported() {
        let s = shape(8, 4);
        let mut st = ModelState::zeros(s);
        st.slow_mut()[0] = 1e200;
        st.slow_mut()[1] = -1e200;
        let err = integrate(&st, &Params::reference(), 1.0, &IntegratorConfig::default(), |_| {}).unwrap_err();
        match err {
            DynamicsError::BlowUp { step, time, params } => {
                assert!(step >= 1);
                assert!(time > 0.0);
                assert_eq!(params, Params::reference());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn param_labels_round_trip() {
        for p in ParamName::ALL {
            assert_eq!(ParamName::from_label(p.label()), Some(p));
        }
        let mut p = Params::reference();
        p.set(ParamName::DampingRatio, 3.0);
        assert_eq!(p.get(ParamName::DampingRatio), 3.0);
        assert_eq!(Params::from_array(p.to_array()), p);
    }
}
