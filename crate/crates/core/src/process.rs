//! Strict-sense and extended processes of a control-affine system, their
//! fixed-step RK4 simulation, and the structural operations that relate
//! them: embedding, restriction, reparametrization by bi-Lipschitz time
//! changes, and canonical parameterization.
//!
//! Controls are piecewise constant. The integration grid subdivides every
//! control interval into equal RK4 steps no longer than the requested step
//! size, so control breakpoints always land exactly on grid nodes. Along
//! each cell the clock component and the accumulated control mass have
//! constant derivatives and are advanced in closed form; only the state
//! needs RK4 stages.
//!
//! Processes are immutable after simulation; simulating distinct processes
//! concurrently is safe.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, Expression, VectorField};
use crate::target::TargetSpec;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("invalid control signal: {0}")]
    InvalidSignal(String),
    #[error("non-finite state at s = {s}")]
    NonFiniteState { s: f64 },
    #[error("clock rate is not strictly positive on interval {interval}")]
    NotStrictPositive { interval: usize },
    #[error("bad time change: {0}")]
    BadTimeChange(String),
    #[error("clock w0 + |w| vanishes on interval {interval}")]
    DegenerateClock { interval: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Control-affine dynamics `dx = f(x) dt + sum_i g_i(x) u_i dt` with the
/// symbolic Jacobians cached for adjoint integration.
#[derive(Debug, Clone)]
pub struct Dynamics {
    drift: VectorField,
    control_fields: Vec<VectorField>,
    jac_drift: Vec<Vec<Expression>>,
    jac_controls: Vec<Vec<Vec<Expression>>>,
}

impl Dynamics {
    pub fn new(drift: VectorField, control_fields: Vec<VectorField>) -> Result<Self, ProcessError> {
        let n = drift.dim();
        for (i, g) in control_fields.iter().enumerate() {
            if g.dim() != n {
                return Err(ProcessError::InvalidSignal(format!(
                    "control field {} has dimension {}, drift has {}",
                    i + 1,
                    g.dim(),
                    n
                )));
            }
        }
        let jac_drift = drift.jacobian();
        let jac_controls = control_fields.iter().map(VectorField::jacobian).collect();
        Ok(Dynamics {
            drift,
            control_fields,
            jac_drift,
            jac_controls,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_fields.len()
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn control_fields(&self) -> &[VectorField] {
        &self.control_fields
    }

    /// `f(x) + sum_i g_i(x) u^i`
    pub fn strict_rhs_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        self.drift.eval_into(x, out)?;
        let mut tmp = vec![0.0; x.len()];
        for (g, &ui) in self.control_fields.iter().zip(u) {
            if ui != 0.0 {
                g.eval_into(x, &mut tmp)?;
                for (o, v) in out.iter_mut().zip(&tmp) {
                    *o += ui * v;
                }
            }
        }
        Ok(())
    }

    /// `f(y) w0 + sum_i g_i(y) w^i`
    pub fn extended_rhs_into(
        &self,
        y: &[f64],
        w0: f64,
        w: &[f64],
        out: &mut [f64],
    ) -> Result<(), ExprError> {
        self.drift.eval_into(y, out)?;
        for o in out.iter_mut() {
            *o *= w0;
        }
        let mut tmp = vec![0.0; y.len()];
        for (g, &wi) in self.control_fields.iter().zip(w) {
            if wi != 0.0 {
                g.eval_into(y, &mut tmp)?;
                for (o, v) in out.iter_mut().zip(&tmp) {
                    *o += wi * v;
                }
            }
        }
        Ok(())
    }

    /// `w0 Df(y) + sum_i w^i Dg_i(y)`, the matrix driving the adjoint flow.
    pub fn combined_jacobian(&self, y: &[f64], w0: f64, w: &[f64]) -> Result<DMatrix<f64>, ExprError> {
        let n = self.state_dim();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut v = w0 * self.jac_drift[i][j].eval(y, 0.0)?;
                for (jac_g, &wi) in self.jac_controls.iter().zip(w) {
                    if wi != 0.0 {
                        v += wi * jac_g[i][j].eval(y, 0.0)?;
                    }
                }
                a[(i, j)] = v;
            }
        }
        Ok(a)
    }
}

/// Integration step selection: either relative to the horizon (the default
/// `1e-3 * S`) or an absolute maximum step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Relative(f64),
    Absolute(f64),
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Relative(1e-3)
    }
}

impl StepSize {
    pub fn resolve(&self, horizon: f64) -> f64 {
        match *self {
            StepSize::Relative(r) => (r * horizon).max(f64::MIN_POSITIVE),
            StepSize::Absolute(h) => h.max(f64::MIN_POSITIVE),
        }
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One JSON record of a piecewise-constant extended control: the left
/// breakpoint of an interval and its values. The final record carries the
/// horizon; its values are optional and, when present, repeat the last
/// interval (the constant-extension convention).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlRecord {
    pub s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
}

/// A piecewise-constant extended control `(w0, w)` on `[0, S]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<ControlRecord>", into = "Vec<ControlRecord>")]
pub struct ControlSignal {
    breakpoints: Vec<f64>,
    w0: Vec<f64>,
    w: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn new(breakpoints: Vec<f64>, w0: Vec<f64>, w: Vec<Vec<f64>>) -> Result<Self, ProcessError> {
        if breakpoints.len() < 2 {
            return Err(ProcessError::InvalidSignal(
                "need at least two breakpoints".into(),
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(ProcessError::InvalidSignal(format!(
                "first breakpoint must be 0, got {}",
                breakpoints[0]
            )));
        }
        if breakpoints.windows(2).any(|p| p[1] <= p[0]) {
            return Err(ProcessError::InvalidSignal(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if !breakpoints.iter().all(|b| b.is_finite()) {
            return Err(ProcessError::InvalidSignal("non-finite breakpoint".into()));
        }
        let n = breakpoints.len() - 1;
        if w0.len() != n || w.len() != n {
            return Err(ProcessError::InvalidSignal(format!(
                "{} intervals but {} clock values and {} control values",
                n,
                w0.len(),
                w.len()
            )));
        }
        let m = w.first().map_or(0, Vec::len);
        if w.iter().any(|wi| wi.len() != m) {
            return Err(ProcessError::InvalidSignal(
                "control values have inconsistent dimensions".into(),
            ));
        }
        let mut w0 = w0;
        for (i, v) in w0.iter_mut().enumerate() {
            if *v < -1e-12 || !v.is_finite() {
                return Err(ProcessError::InvalidSignal(format!(
                    "w0 must be nonnegative, got {v} on interval {i}"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(ControlSignal { breakpoints, w0, w })
    }

    pub fn constant(horizon: f64, w0: f64, w: Vec<f64>) -> Result<Self, ProcessError> {
        ControlSignal::new(vec![0.0, horizon], vec![w0], vec![w])
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn intervals(&self) -> usize {
        self.w0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn value(&self, interval: usize) -> (f64, &[f64]) {
        (self.w0[interval], &self.w[interval])
    }

    /// Interval containing `s` (right-continuous; clamped to the ends).
    pub fn index_at(&self, s: f64) -> usize {
        if s <= 0.0 {
            return 0;
        }
        match self
            .breakpoints
            .binary_search_by(|b| b.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.intervals() - 1),
            Err(i) => (i - 1).min(self.intervals() - 1),
        }
    }

    pub fn min_clock_rate(&self) -> f64 {
        self.w0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Tag check: `w0 > 0` on every interval.
    pub fn is_strict_positive(&self) -> bool {
        self.w0.iter().all(|&v| v > 0.0)
    }

    /// Largest deviation of `w0 + |w|` from 1 over the intervals.
    pub fn slice_residual(&self) -> f64 {
        self.w0
            .iter()
            .zip(&self.w)
            .map(|(&w0, w)| (w0 + euclidean_norm(w) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Tag check: `w0 + |w| = 1` up to 1e-9 on every interval.
    pub fn is_canonical(&self) -> bool {
        self.slice_residual() <= 1e-9
    }

    /// Smallest `w0 + |w|` over the intervals.
    pub fn min_activity(&self) -> f64 {
        self.w0
            .iter()
            .zip(&self.w)
            .map(|(&w0, w)| w0 + euclidean_norm(w))
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact `(integral of w0, integral of |w|)` over `[0, S]`.
    pub fn mass(&self) -> (f64, f64) {
        let mut m0 = 0.0;
        let mut mw = 0.0;
        for i in 0..self.intervals() {
            let ds = self.breakpoints[i + 1] - self.breakpoints[i];
            m0 += ds * self.w0[i];
            mw += ds * euclidean_norm(&self.w[i]);
        }
        (m0, mw)
    }

    pub fn validate_in_cone(&self, cone: &crate::cone::Cone, tol: f64) -> Result<(), ProcessError> {
        if self.control_dim() != cone.dim() {
            return Err(ProcessError::InvalidSignal(format!(
                "control dimension {} does not match cone dimension {}",
                self.control_dim(),
                cone.dim()
            )));
        }
        for (i, wi) in self.w.iter().enumerate() {
            let dist = cone
                .distance(wi)
                .map_err(|e| ProcessError::InvalidSignal(e.to_string()))?;
            if dist > tol * (1.0 + euclidean_norm(wi)) {
                return Err(ProcessError::InvalidSignal(format!(
                    "control value on interval {i} lies {dist:.3e} outside the cone"
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<ControlRecord>> for ControlSignal {
    type Error = ProcessError;

    fn try_from(records: Vec<ControlRecord>) -> Result<Self, ProcessError> {
        if records.len() < 2 {
            return Err(ProcessError::InvalidSignal(
                "need at least two control records".into(),
            ));
        }
        let breakpoints: Vec<f64> = records.iter().map(|r| r.s).collect();
        let mut w0 = Vec::new();
        let mut w = Vec::new();
        for (i, r) in records[..records.len() - 1].iter().enumerate() {
            let (Some(r0), Some(rw)) = (r.w0, r.w.clone()) else {
                return Err(ProcessError::InvalidSignal(format!(
                    "record {i} is missing w0 or w"
                )));
            };
            w0.push(r0);
            w.push(rw);
        }
        ControlSignal::new(breakpoints, w0, w)
    }
}

impl From<ControlSignal> for Vec<ControlRecord> {
    fn from(sig: ControlSignal) -> Vec<ControlRecord> {
        let n = sig.intervals();
        (0..=n)
            .map(|i| {
                let v = i.min(n - 1);
                ControlRecord {
                    s: sig.breakpoints[i],
                    w0: Some(sig.w0[v]),
                    w: Some(sig.w[v].clone()),
                }
            })
            .collect()
    }
}

/// One JSON record of a piecewise-constant strict-sense control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrictRecord {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

/// A piecewise-constant strict-sense control `u` on `[0, T]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<StrictRecord>", into = "Vec<StrictRecord>")]
pub struct StrictControl {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl StrictControl {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, ProcessError> {
        if breakpoints.len() < 2 || breakpoints[0] != 0.0 {
            return Err(ProcessError::InvalidSignal(
                "strict control needs breakpoints starting at 0".into(),
            ));
        }
        if breakpoints.windows(2).any(|p| p[1] <= p[0]) {
            return Err(ProcessError::InvalidSignal(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if values.len() + 1 != breakpoints.len() {
            return Err(ProcessError::InvalidSignal(
                "interval/value count mismatch".into(),
            ));
        }
        let m = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != m) {
            return Err(ProcessError::InvalidSignal(
                "control values have inconsistent dimensions".into(),
            ));
        }
        Ok(StrictControl {
            breakpoints,
            values,
        })
    }

    pub fn constant(horizon: f64, u: Vec<f64>) -> Result<Self, ProcessError> {
        StrictControl::new(vec![0.0, horizon], vec![u])
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn control_dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn value(&self, interval: usize) -> &[f64] {
        &self.values[interval]
    }
}

impl TryFrom<Vec<StrictRecord>> for StrictControl {
    type Error = ProcessError;

    fn try_from(records: Vec<StrictRecord>) -> Result<Self, ProcessError> {
        if records.len() < 2 {
            return Err(ProcessError::InvalidSignal(
                "need at least two control records".into(),
            ));
        }
        let breakpoints: Vec<f64> = records.iter().map(|r| r.t).collect();
        let mut values = Vec::new();
        for (i, r) in records[..records.len() - 1].iter().enumerate() {
            let Some(u) = r.u.clone() else {
                return Err(ProcessError::InvalidSignal(format!(
                    "record {i} is missing u"
                )));
            };
            values.push(u);
        }
        StrictControl::new(breakpoints, values)
    }
}

impl From<StrictControl> for Vec<StrictRecord> {
    fn from(c: StrictControl) -> Vec<StrictRecord> {
        let n = c.intervals();
        (0..=n)
            .map(|i| StrictRecord {
                t: c.breakpoints[i],
                u: Some(c.values[i.min(n - 1)].clone()),
            })
            .collect()
    }
}

/// An extended process: control, initial state, and the `(y0, y, beta)`
/// trajectory on the integration grid. Beyond the horizon the trajectory
/// follows the constant-extension convention.
#[derive(Debug, Clone)]
pub struct ExtendedProcess {
    pub control: ControlSignal,
    pub initial_state: Vec<f64>,
    /// Grid nodes, `s[0] = 0`, `s[last] = S`.
    pub s: Vec<f64>,
    pub y0: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    /// Control interval index of each grid cell.
    pub cell_interval: Vec<usize>,
}

impl ExtendedProcess {
    pub fn horizon(&self) -> f64 {
        self.control.horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    /// `(y0, y, beta)` at the horizon.
    pub fn endpoint(&self) -> (f64, &[f64], f64) {
        (
            *self.y0.last().unwrap(),
            self.y.last().unwrap(),
            *self.beta.last().unwrap(),
        )
    }

    /// Linear interpolation on the grid with constant extension beyond `S`.
    pub fn sample_at(&self, s: f64) -> (f64, Vec<f64>, f64) {
        if s <= 0.0 {
            return (self.y0[0], self.y[0].clone(), self.beta[0]);
        }
        if s >= *self.s.last().unwrap() {
            let k = self.s.len() - 1;
            return (self.y0[k], self.y[k].clone(), self.beta[k]);
        }
        let idx = match self.s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => return (self.y0[i], self.y[i].clone(), self.beta[i]),
            Err(i) => i,
        };
        let (a, b) = (self.s[idx - 1], self.s[idx]);
        let th = (s - a) / (b - a);
        let y = self.y[idx - 1]
            .iter()
            .zip(&self.y[idx])
            .map(|(p, q)| p + th * (q - p))
            .collect();
        (
            self.y0[idx - 1] + th * (self.y0[idx] - self.y0[idx - 1]),
            y,
            self.beta[idx - 1] + th * (self.beta[idx] - self.beta[idx - 1]),
        )
    }
}

/// A strict-sense process: control, initial state, and `(x, v)` samples,
/// where `v` tracks the accumulated L1 control mass.
#[derive(Debug, Clone)]
pub struct StrictProcess {
    pub control: StrictControl,
    pub initial_state: Vec<f64>,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub cell_interval: Vec<usize>,
}

impl StrictProcess {
    pub fn horizon(&self) -> f64 {
        self.control.horizon()
    }

    pub fn endpoint(&self) -> (&[f64], f64) {
        (self.x.last().unwrap(), *self.v.last().unwrap())
    }

    pub fn sample_at(&self, t: f64) -> (Vec<f64>, f64) {
        if t <= 0.0 {
            return (self.x[0].clone(), self.v[0]);
        }
        if t >= *self.t.last().unwrap() {
            let k = self.t.len() - 1;
            return (self.x[k].clone(), self.v[k]);
        }
        let idx = match self.t.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return (self.x[i].clone(), self.v[i]),
            Err(i) => i,
        };
        let (a, b) = (self.t[idx - 1], self.t[idx]);
        let th = (t - a) / (b - a);
        let x = self.x[idx - 1]
            .iter()
            .zip(&self.x[idx])
            .map(|(p, q)| p + th * (q - p))
            .collect();
        (x, self.v[idx - 1] + th * (self.v[idx] - self.v[idx - 1]))
    }
}

/// Subdivide every control interval into equal steps of length at most
/// `h_max`, so breakpoints coincide with grid nodes.
fn build_grid(breakpoints: &[f64], h_max: f64) -> (Vec<f64>, Vec<usize>) {
    let mut s = vec![breakpoints[0]];
    let mut cell_interval = Vec::new();
    for i in 0..breakpoints.len() - 1 {
        let (a, b) = (breakpoints[i], breakpoints[i + 1]);
        let steps = ((b - a) / h_max).ceil().max(1.0) as usize;
        let h = (b - a) / steps as f64;
        for k in 1..=steps {
            let node = if k == steps { b } else { a + h * k as f64 };
            s.push(node);
            cell_interval.push(i);
        }
    }
    (s, cell_interval)
}

fn rk4_state_step(
    dynamics: &Dynamics,
    y: &[f64],
    h: f64,
    rhs: impl Fn(&Dynamics, &[f64], &mut [f64]) -> Result<(), ExprError>,
) -> Result<Vec<f64>, ExprError> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    rhs(dynamics, y, &mut k1)?;
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k1[j];
    }
    rhs(dynamics, &tmp, &mut k2)?;
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k2[j];
    }
    rhs(dynamics, &tmp, &mut k3)?;
    for j in 0..n {
        tmp[j] = y[j] + h * k3[j];
    }
    rhs(dynamics, &tmp, &mut k4)?;
    Ok((0..n)
        .map(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
        .collect())
}

/// Integrate the extended system for a piecewise-constant control.
pub fn simulate_extended(
    dynamics: &Dynamics,
    control: &ControlSignal,
    initial_state: &[f64],
    step: StepSize,
) -> Result<ExtendedProcess, ProcessError> {
    if initial_state.len() != dynamics.state_dim() {
        return Err(ProcessError::InvalidSignal(format!(
            "initial state has dimension {}, dynamics {}",
            initial_state.len(),
            dynamics.state_dim()
        )));
    }
    if control.control_dim() != dynamics.control_dim() {
        return Err(ProcessError::InvalidSignal(format!(
            "control has dimension {}, dynamics {}",
            control.control_dim(),
            dynamics.control_dim()
        )));
    }
    let h_max = step.resolve(control.horizon());
    let (s, cell_interval) = build_grid(control.breakpoints(), h_max);
    let nodes = s.len();

    let mut y0 = Vec::with_capacity(nodes);
    let mut y = Vec::with_capacity(nodes);
    let mut beta = Vec::with_capacity(nodes);
    y0.push(0.0);
    y.push(initial_state.to_vec());
    beta.push(0.0);

    for k in 0..nodes - 1 {
        let h = s[k + 1] - s[k];
        let (w0, w) = control.value(cell_interval[k]);
        let next = rk4_state_step(dynamics, &y[k], h, |d, state, out| {
            d.extended_rhs_into(state, w0, w, out)
        })?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ProcessError::NonFiniteState { s: s[k + 1] });
        }
        y0.push(y0[k] + w0 * h);
        beta.push(beta[k] + euclidean_norm(w) * h);
        y.push(next);
    }

    Ok(ExtendedProcess {
        control: control.clone(),
        initial_state: initial_state.to_vec(),
        s,
        y0,
        y,
        beta,
        cell_interval,
    })
}

/// Integrate the strict-sense system for a piecewise-constant control.
pub fn simulate_strict(
    dynamics: &Dynamics,
    control: &StrictControl,
    initial_state: &[f64],
    step: StepSize,
) -> Result<StrictProcess, ProcessError> {
    if initial_state.len() != dynamics.state_dim() {
        return Err(ProcessError::InvalidSignal(format!(
            "initial state has dimension {}, dynamics {}",
            initial_state.len(),
            dynamics.state_dim()
        )));
    }
    if control.control_dim() != dynamics.control_dim() {
        return Err(ProcessError::InvalidSignal(format!(
            "control has dimension {}, dynamics {}",
            control.control_dim(),
            dynamics.control_dim()
        )));
    }
    let h_max = step.resolve(control.horizon());
    let (t, cell_interval) = build_grid(control.breakpoints(), h_max);
    let nodes = t.len();

    let mut x = Vec::with_capacity(nodes);
    let mut v = Vec::with_capacity(nodes);
    x.push(initial_state.to_vec());
    v.push(0.0);

    for k in 0..nodes - 1 {
        let h = t[k + 1] - t[k];
        let u = control.value(cell_interval[k]);
        let next = rk4_state_step(dynamics, &x[k], h, |d, state, out| {
            d.strict_rhs_into(state, u, out)
        })?;
        if next.iter().any(|val| !val.is_finite()) {
            return Err(ProcessError::NonFiniteState { s: t[k + 1] });
        }
        v.push(v[k] + euclidean_norm(u) * h);
        x.push(next);
    }

    Ok(StrictProcess {
        control: control.clone(),
        initial_state: initial_state.to_vec(),
        t,
        x,
        v,
        cell_interval,
    })
}

/// Embed a strict-sense process as a canonical extended process via the
/// time change `sigma(t) = t + v(t)`: on the interval with control `u_i`
/// the slope is `1 + |u_i|`, so `w0 = 1/(1+|u_i|)` and `w = u_i w0`. The
/// output is computed exactly at the control level and re-integrated.
pub fn embed(
    dynamics: &Dynamics,
    process: &StrictProcess,
    step: StepSize,
) -> Result<ExtendedProcess, ProcessError> {
    let control = &process.control;
    let mut breakpoints = Vec::with_capacity(control.intervals() + 1);
    let mut w0 = Vec::with_capacity(control.intervals());
    let mut w = Vec::with_capacity(control.intervals());
    breakpoints.push(0.0);
    let mut s = 0.0;
    for i in 0..control.intervals() {
        let u = control.value(i);
        let slope = 1.0 + euclidean_norm(u);
        let dt = control.breakpoints()[i + 1] - control.breakpoints()[i];
        s += dt * slope;
        breakpoints.push(s);
        let rate = 1.0 / slope;
        w0.push(rate);
        w.push(u.iter().map(|ui| ui * rate).collect());
    }
    let signal = ControlSignal::new(breakpoints, w0, w)?;
    simulate_extended(dynamics, &signal, &process.initial_state, step)
}

/// Recover the strict-sense process from an embedded one: per interval
/// `dt = ds * w0` and `u = w / w0`, then re-integrate in original time.
pub fn restrict(
    dynamics: &Dynamics,
    process: &ExtendedProcess,
    step: StepSize,
) -> Result<StrictProcess, ProcessError> {
    let control = &process.control;
    for i in 0..control.intervals() {
        if control.value(i).0 <= 0.0 {
            return Err(ProcessError::NotStrictPositive { interval: i });
        }
    }
    let mut breakpoints = Vec::with_capacity(control.intervals() + 1);
    let mut values = Vec::with_capacity(control.intervals());
    breakpoints.push(0.0);
    let mut t = 0.0;
    for i in 0..control.intervals() {
        let (w0, w) = control.value(i);
        let ds = control.breakpoints()[i + 1] - control.breakpoints()[i];
        t += ds * w0;
        breakpoints.push(t);
        values.push(w.iter().map(|wi| wi / w0).collect());
    }
    let strict = StrictControl::new(breakpoints, values)?;
    simulate_strict(dynamics, &strict, &process.initial_state, step)
}

/// A strictly increasing piecewise-linear time change given by its knots.
#[derive(Debug, Clone)]
pub struct TimeChange {
    domain: Vec<f64>,
    image: Vec<f64>,
}

impl TimeChange {
    pub fn new(domain: Vec<f64>, image: Vec<f64>) -> Result<Self, ProcessError> {
        if domain.len() != image.len() || domain.len() < 2 {
            return Err(ProcessError::BadTimeChange(
                "need matching knot lists with at least two knots".into(),
            ));
        }
        if domain[0] != 0.0 || image[0] != 0.0 {
            return Err(ProcessError::BadTimeChange("knots must start at 0".into()));
        }
        if domain.windows(2).any(|p| p[1] <= p[0]) || image.windows(2).any(|p| p[1] <= p[0]) {
            return Err(ProcessError::BadTimeChange(
                "time change must be strictly increasing".into(),
            ));
        }
        Ok(TimeChange { domain, image })
    }

    pub fn identity(horizon: f64) -> Self {
        TimeChange {
            domain: vec![0.0, horizon],
            image: vec![0.0, horizon],
        }
    }

    /// The linear map `[0, domain_end] -> [0, image_end]`.
    pub fn linear(domain_end: f64, image_end: f64) -> Self {
        TimeChange {
            domain: vec![0.0, domain_end],
            image: vec![0.0, image_end],
        }
    }

    pub fn domain_end(&self) -> f64 {
        *self.domain.last().unwrap()
    }

    pub fn image_end(&self) -> f64 {
        *self.image.last().unwrap()
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.domain, &self.image)
    }

    /// `(min slope, max slope)` over the linear pieces.
    pub fn slope_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..self.domain.len() - 1 {
            let slope =
                (self.image[i + 1] - self.image[i]) / (self.domain[i + 1] - self.domain[i]);
            lo = lo.min(slope);
            hi = hi.max(slope);
        }
        (lo, hi)
    }

    pub fn eval(&self, s: f64) -> f64 {
        piecewise_linear(&self.domain, &self.image, s)
    }

    pub fn invert(&self, sigma: f64) -> f64 {
        piecewise_linear(&self.image, &self.domain, sigma)
    }
}

fn piecewise_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let idx = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => return ys[i],
        Err(i) => i,
    };
    let th = (x - xs[idx - 1]) / (xs[idx] - xs[idx - 1]);
    ys[idx - 1] + th * (ys[idx] - ys[idx - 1])
}

/// Reparametrize an extended process by a time change `sigma` mapping
/// `[0, S_new]` onto `[0, S]`: the control picks up the chain-rule factor
/// `d sigma/ds` and the trajectory is re-integrated.
pub fn reparametrize(
    dynamics: &Dynamics,
    process: &ExtendedProcess,
    sigma: &TimeChange,
    step: StepSize,
) -> Result<ExtendedProcess, ProcessError> {
    let s_old = process.horizon();
    if (sigma.image_end() - s_old).abs() > 1e-9 * (1.0 + s_old) {
        return Err(ProcessError::BadTimeChange(format!(
            "time change maps onto [0, {}], process horizon is {}",
            sigma.image_end(),
            s_old
        )));
    }
    let s_new = sigma.domain_end();

    // Combined breakpoints: sigma's own knots plus the preimages of the old
    // control breakpoints, so each new cell has a constant control and a
    // constant slope.
    let mut cuts: Vec<f64> = sigma.knots().0.to_vec();
    for &b in process.control.breakpoints() {
        cuts.push(sigma.invert(b));
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + s_new));
    if let Some(first) = cuts.first_mut() {
        *first = 0.0;
    }
    if let Some(last) = cuts.last_mut() {
        *last = s_new;
    }

    let mut w0 = Vec::with_capacity(cuts.len() - 1);
    let mut w = Vec::with_capacity(cuts.len() - 1);
    for i in 0..cuts.len() - 1 {
        let (a, b) = (cuts[i], cuts[i + 1]);
        let slope = (sigma.eval(b) - sigma.eval(a)) / (b - a);
        if slope <= 0.0 || !slope.is_finite() {
            return Err(ProcessError::BadTimeChange(format!(
                "nonpositive slope {slope} on [{a}, {b}]"
            )));
        }
        let mid = sigma.eval(0.5 * (a + b));
        let (ow0, ow) = process.control.value(process.control.index_at(mid));
        w0.push(ow0 * slope);
        w.push(ow.iter().map(|v| v * slope).collect());
    }
    let control = ControlSignal::new(cuts, w0, w)?;
    simulate_extended(dynamics, &control, &process.initial_state, step)
}

/// Canonical parameterization: rescale pseudo-time by the activity
/// `w0 + |w|` so the result satisfies `w0 + |w| = 1` a.e. Idempotent, and
/// the endpoint is preserved.
pub fn canonicalize(
    dynamics: &Dynamics,
    process: &ExtendedProcess,
    step: StepSize,
) -> Result<ExtendedProcess, ProcessError> {
    let control = &process.control;
    let mut breakpoints = Vec::with_capacity(control.intervals() + 1);
    let mut w0 = Vec::with_capacity(control.intervals());
    let mut w = Vec::with_capacity(control.intervals());
    breakpoints.push(0.0);
    let mut s = 0.0;
    for i in 0..control.intervals() {
        let (ow0, ow) = control.value(i);
        let activity = ow0 + euclidean_norm(ow);
        if activity <= 0.0 {
            return Err(ProcessError::DegenerateClock { interval: i });
        }
        let ds = control.breakpoints()[i + 1] - control.breakpoints()[i];
        s += ds * activity;
        breakpoints.push(s);
        w0.push(ow0 / activity);
        w.push(ow.iter().map(|v| v / activity).collect());
    }
    let canonical = ControlSignal::new(breakpoints, w0, w)?;
    simulate_extended(dynamics, &canonical, &process.initial_state, step)
}

/// Feasibility of an extended process against a target set and energy
/// bound, at tolerance `eta`.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub endpoint_time: f64,
    pub endpoint_state: Vec<f64>,
    pub endpoint_energy: f64,
    pub target_distance: f64,
    pub projection_converged: bool,
    pub target_ok: bool,
    pub energy_ok: bool,
    pub feasible: bool,
    pub eta: f64,
}

pub fn check_feasible(
    process: &ExtendedProcess,
    target: &TargetSpec,
    energy_bound: f64,
    eta: f64,
) -> Result<FeasibilityReport, ProcessError> {
    let (y0_end, y_end, beta_end) = process.endpoint();
    let (distance, converged) = target.distance(y0_end, y_end)?;
    let target_ok = distance <= eta;
    let energy_ok = beta_end <= energy_bound + eta;
    Ok(FeasibilityReport {
        endpoint_time: y0_end,
        endpoint_state: y_end.to_vec(),
        endpoint_energy: beta_end,
        target_distance: distance,
        projection_converged: converged,
        target_ok,
        energy_ok,
        feasible: target_ok && energy_ok,
        eta,
    })
}

/// CSV export with header `s,y0,y1..yn,beta`.
pub fn extended_trajectory_csv(process: &ExtendedProcess) -> String {
    let n = process.state_dim();
    let mut out = String::from("s,y0");
    for i in 1..=n {
        out.push_str(&format!(",y{i}"));
    }
    out.push_str(",beta\n");
    for k in 0..process.s.len() {
        out.push_str(&format!("{},{}", process.s[k], process.y0[k]));
        for v in &process.y[k] {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", process.beta[k]));
    }
    out
}

/// CSV export with header `t,x1..xn,v`.
pub fn strict_trajectory_csv(process: &StrictProcess) -> String {
    let n = process.initial_state.len();
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",v\n");
    for k in 0..process.t.len() {
        out.push_str(&format!("{}", process.t[k]));
        for v in &process.x[k] {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", process.v[k]));
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expr::parse;

    pub(crate) fn scalar_dynamics(f: &str, g: &str) -> Dynamics {
        Dynamics::new(
            VectorField::new(1, vec![parse(f, 1).unwrap()]).unwrap(),
            vec![VectorField::new(1, vec![parse(g, 1).unwrap()]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn strict_linear_flow_is_exact() {
        let dynamics = scalar_dynamics("0", "1");
        let control = StrictControl::constant(1.0, vec![1.0]).unwrap();
        let p = simulate_strict(&dynamics, &control, &[0.0], StepSize::default()).unwrap();
        for (k, &t) in p.t.iter().enumerate() {
            assert!((p.x[k][0] - t).abs() <= 1e-10);
            assert!((p.v[k] - t).abs() <= 1e-10);
        }
    }

    #[test]
    fn strict_drift_matches_exponential() {
        let dynamics = scalar_dynamics("x1", "0");
        let control = StrictControl::constant(1.0, vec![0.0]).unwrap();
        let p = simulate_strict(&dynamics, &control, &[1.0], StepSize::Absolute(1e-3)).unwrap();
        let (x_end, v_end) = p.endpoint();
        assert!((x_end[0] - std::f64::consts::E).abs() <= 1e-8);
        assert_eq!(v_end, 0.0);
    }

    #[test]
    fn zero_control_zero_drift_is_constant() {
        let dynamics = scalar_dynamics("0", "1");
        let control = StrictControl::constant(2.0, vec![0.0]).unwrap();
        let p = simulate_strict(&dynamics, &control, &[0.7], StepSize::default()).unwrap();
        for k in 0..p.t.len() {
            assert_eq!(p.x[k][0], 0.7);
            assert_eq!(p.v[k], 0.0);
        }
    }

    #[test]
    fn rk4_order_against_closed_form() {
        let dynamics = scalar_dynamics("x1", "0");
        let control = StrictControl::constant(1.0, vec![0.0]).unwrap();
        let err = |h: f64| {
            let p = simulate_strict(&dynamics, &control, &[1.0], StepSize::Absolute(h)).unwrap();
            (p.endpoint().0[0] - std::f64::consts::E).abs()
        };
        let e1 = err(0.02);
        let e2 = err(0.01);
        assert!(
            e1 / e2 >= 8.0,
            "halving h reduced the error only by {}",
            e1 / e2
        );
    }

    #[test]
    fn extended_pure_time_and_pure_jump() {
        let dynamics = scalar_dynamics("0", "1");

        // Pure time: w0 = 1, w = 0.
        let sig = ControlSignal::constant(1.0, 1.0, vec![0.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.3], StepSize::default()).unwrap();
        let (y0_end, y_end, beta_end) = z.endpoint();
        assert!((y0_end - 1.0).abs() <= 1e-12);
        assert_eq!(y_end[0], 0.3);
        assert_eq!(beta_end, 0.0);

        // Pure jump: w0 = 0, w = 1.
        let sig = ControlSignal::constant(1.0, 0.0, vec![1.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        for (k, &s) in z.s.iter().enumerate() {
            assert!((z.y0[k] - 0.0).abs() <= 1e-14);
            assert!((z.y[k][0] - s).abs() <= 1e-10);
            assert!((z.beta[k] - s).abs() <= 1e-12);
        }

        // Canonical half/half: y0(S) = beta(S) = S/2.
        let sig = ControlSignal::constant(1.0, 0.5, vec![0.5]).unwrap();
        assert!(sig.is_canonical());
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let (y0_end, _, beta_end) = z.endpoint();
        assert!((y0_end - 0.5).abs() <= 1e-12);
        assert!((beta_end - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn monotone_clock_and_mass() {
        let dynamics = scalar_dynamics("sin(x1)", "1");
        let sig = ControlSignal::new(
            vec![0.0, 0.4, 1.0, 1.7],
            vec![0.2, 0.0, 1.0],
            vec![vec![0.8], vec![-1.0], vec![0.0]],
        )
        .unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.1], StepSize::default()).unwrap();
        for k in 1..z.s.len() {
            assert!(z.y0[k] >= z.y0[k - 1]);
            assert!(z.beta[k] >= z.beta[k - 1]);
        }
    }

    #[test]
    fn embed_hand_example() {
        let dynamics = scalar_dynamics("0", "1");
        let control = StrictControl::constant(1.0, vec![1.0]).unwrap();
        let p = simulate_strict(&dynamics, &control, &[0.0], StepSize::default()).unwrap();
        let z = embed(&dynamics, &p, StepSize::default()).unwrap();
        assert!((z.horizon() - 2.0).abs() <= 1e-12);
        let (w0, w) = z.control.value(0);
        assert!((w0 - 0.5).abs() <= 1e-12);
        assert!((w[0] - 0.5).abs() <= 1e-12);
        assert!(z.control.is_canonical());
        assert!(z.control.is_strict_positive());
        // y0(s) = s/2 along the grid.
        for (k, &s) in z.s.iter().enumerate() {
            assert!((z.y0[k] - 0.5 * s).abs() <= 1e-12);
        }
        // Endpoint identity y(S) = x(T), y0(S) = T.
        let (y0_end, y_end, _) = z.endpoint();
        assert!((y0_end - 1.0).abs() <= 1e-12);
        assert!((y_end[0] - p.endpoint().0[0]).abs() <= 1e-10);
    }

    #[test]
    fn embed_of_zero_control_is_identity_clock() {
        let dynamics = scalar_dynamics("sin(x1)", "1");
        let control = StrictControl::constant(1.5, vec![0.0]).unwrap();
        let p = simulate_strict(&dynamics, &control, &[0.4], StepSize::default()).unwrap();
        let z = embed(&dynamics, &p, StepSize::default()).unwrap();
        assert!((z.horizon() - 1.5).abs() <= 1e-12);
        let (w0, w) = z.control.value(0);
        assert_eq!(w0, 1.0);
        assert_eq!(w[0], 0.0);
        let (_, y_end, _) = z.endpoint();
        assert!((y_end[0] - p.endpoint().0[0]).abs() <= 1e-10);
    }

    #[test]
    fn restrict_inverts_embed() {
        let dynamics = scalar_dynamics("0.3*sin(x1)", "1");
        let control = StrictControl::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![1.0], vec![-0.5]],
        )
        .unwrap();
        let p = simulate_strict(&dynamics, &control, &[0.2], StepSize::default()).unwrap();
        let z = embed(&dynamics, &p, StepSize::default()).unwrap();
        let back = restrict(&dynamics, &z, StepSize::default()).unwrap();
        assert!((back.horizon() - p.horizon()).abs() <= 1e-12);
        for i in 0..p.control.intervals() {
            assert!((back.control.value(i)[0] - p.control.value(i)[0]).abs() <= 1e-12);
            assert!(
                (back.control.breakpoints()[i + 1] - p.control.breakpoints()[i + 1]).abs()
                    <= 1e-12
            );
        }
        // Same control, same integrator: trajectories match to roundoff.
        for k in 0..p.t.len() {
            assert!((back.x[k][0] - p.x[k][0]).abs() <= 1e-10);
            assert!((back.v[k] - p.v[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn restrict_rejects_pure_impulse() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::constant(1.0, 0.0, vec![1.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        assert!(matches!(
            restrict(&dynamics, &z, StepSize::default()),
            Err(ProcessError::NotStrictPositive { interval: 0 })
        ));
    }

    #[test]
    fn restrict_of_unit_clock_keeps_horizon() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::constant(1.3, 1.0, vec![0.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.5], StepSize::default()).unwrap();
        let p = restrict(&dynamics, &z, StepSize::default()).unwrap();
        assert!((p.horizon() - 1.3).abs() <= 1e-12);
        assert_eq!(p.control.value(0)[0], 0.0);
    }

    #[test]
    fn reparametrize_identity_and_linear() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::constant(2.0, 0.5, vec![0.5]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();

        let id = TimeChange::identity(2.0);
        let same = reparametrize(&dynamics, &z, &id, StepSize::default()).unwrap();
        assert!((same.horizon() - 2.0).abs() <= 1e-12);
        let (w0, w) = same.control.value(0);
        assert!((w0 - 0.5).abs() <= 1e-12 && (w[0] - 0.5).abs() <= 1e-12);

        // sigma(s) = 2s squeezes the horizon to 1 and doubles the control.
        let tc = TimeChange::linear(1.0, 2.0);
        let fast = reparametrize(&dynamics, &z, &tc, StepSize::default()).unwrap();
        assert!((fast.horizon() - 1.0).abs() <= 1e-12);
        let (w0, w) = fast.control.value(0);
        assert!((w0 - 1.0).abs() <= 1e-12 && (w[0] - 1.0).abs() <= 1e-12);
        let (a0, a, ab) = z.endpoint();
        let (b0, b, bb) = fast.endpoint();
        assert!((a0 - b0).abs() <= 1e-8);
        assert!((a[0] - b[0]).abs() <= 1e-8);
        assert!((ab - bb).abs() <= 1e-8);
    }

    #[test]
    fn reparametrize_rejects_horizon_mismatch() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::constant(2.0, 0.5, vec![0.5]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let tc = TimeChange::linear(1.0, 1.5);
        assert!(matches!(
            reparametrize(&dynamics, &z, &tc, StepSize::default()),
            Err(ProcessError::BadTimeChange(_))
        ));
    }

    #[test]
    fn canonicalize_hand_example() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::constant(1.0, 1.0, vec![1.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let c = canonicalize(&dynamics, &z, StepSize::default()).unwrap();
        assert!((c.horizon() - 2.0).abs() <= 1e-12);
        let (w0, w) = c.control.value(0);
        assert!((w0 - 0.5).abs() <= 1e-12 && (w[0] - 0.5).abs() <= 1e-12);
        assert!(c.control.is_canonical());
        let (a0, a, ab) = z.endpoint();
        let (b0, b, bb) = c.endpoint();
        assert!((a0 - b0).abs() <= 1e-9 && (a[0] - b[0]).abs() <= 1e-9 && (ab - bb).abs() <= 1e-9);
    }

    #[test]
    fn canonicalize_is_idempotent_and_fixes_canonical_inputs() {
        let dynamics = scalar_dynamics("0", "1");
        for sig in [
            ControlSignal::constant(1.0, 0.0, vec![1.0]).unwrap(),
            ControlSignal::new(
                vec![0.0, 0.4, 1.0],
                vec![0.25, 1.0],
                vec![vec![0.75], vec![0.0]],
            )
            .unwrap(),
        ] {
            assert!(sig.is_canonical());
            let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
            let c = canonicalize(&dynamics, &z, StepSize::default()).unwrap();
            assert!((c.horizon() - z.horizon()).abs() <= 1e-10);
            for i in 0..sig.intervals() {
                let (a0, a) = sig.value(i);
                let (b0, b) = c.control.value(i);
                assert!((a0 - b0).abs() <= 1e-10);
                assert!((a[0] - b[0]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_clock_is_rejected() {
        let dynamics = scalar_dynamics("0", "1");
        let sig = ControlSignal::new(
            vec![0.0, 0.5, 1.0],
            vec![0.5, 0.0],
            vec![vec![0.5], vec![0.0]],
        )
        .unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        assert!(matches!(
            canonicalize(&dynamics, &z, StepSize::default()),
            Err(ProcessError::DegenerateClock { interval: 1 })
        ));
    }

    #[test]
    fn feasibility_examples() {
        let dynamics = scalar_dynamics("0", "1");
        let target = TargetSpec::point(1.0, vec![1.0]);

        // Endpoint exactly on the target.
        let sig = ControlSignal::new(
            vec![0.0, 2.0],
            vec![0.5],
            vec![vec![0.5]],
        )
        .unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let rep = check_feasible(&z, &target, f64::INFINITY, 1e-9).unwrap();
        assert!(rep.feasible && rep.target_ok && rep.energy_ok);

        // Endpoint (1, 0.9): distance 0.1 > eta = 0.05.
        let sig = ControlSignal::new(
            vec![0.0, 2.0],
            vec![0.5],
            vec![vec![0.45]],
        )
        .unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let rep = check_feasible(&z, &target, f64::INFINITY, 0.05).unwrap();
        assert!(!rep.feasible);
        assert!((rep.target_distance - 0.1).abs() <= 1e-9);

        // Energy bound violation.
        let target0 = TargetSpec::point(0.0, vec![2.0]);
        let sig = ControlSignal::constant(2.0, 0.0, vec![1.0]).unwrap();
        let z = simulate_extended(&dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let rep = check_feasible(&z, &target0, 1.0, 1e-6).unwrap();
        assert!(!rep.energy_ok && !rep.feasible);
    }

    #[test]
    fn non_finite_states_are_reported() {
        let dynamics = scalar_dynamics("x1^2", "0");
        let control = StrictControl::constant(10.0, vec![0.0]).unwrap();
        let r = simulate_strict(&dynamics, &control, &[5.0], StepSize::default());
        assert!(matches!(r, Err(ProcessError::NonFiniteState { .. })));
    }

    #[test]
    fn control_signal_validation() {
        assert!(ControlSignal::new(vec![0.0], vec![], vec![]).is_err());
        assert!(ControlSignal::new(vec![0.0, 0.0], vec![1.0], vec![vec![0.0]]).is_err());
        assert!(ControlSignal::new(vec![0.1, 1.0], vec![1.0], vec![vec![0.0]]).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![-0.5], vec![vec![0.0]]).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![1.0], vec![vec![0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn control_records_roundtrip() {
        let sig = ControlSignal::new(
            vec![0.0, 0.5, 1.25],
            vec![0.5, 0.0],
            vec![vec![0.5, 0.0], vec![0.6, 0.8]],
        )
        .unwrap();
        let json = serde_json::to_string(&sig).unwrap();
        let back: ControlSignal = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sig);
    }
}
