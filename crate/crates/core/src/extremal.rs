//! Extremality certificates for extended processes: the unmaximized
//! Hamiltonian, the backward adjoint flow, the per-condition checker, and
//! the normal/abnormal classifier.
//!
//! A candidate certificate is a multiplier tuple `(p0, p(.), pi, lambda)`
//! with `pi <= 0`, `lambda >= 0`, where `p` solves the adjoint equation
//! backward from its terminal value. The checker evaluates, on the
//! integration grid:
//!
//! 1. nontriviality of `(p0, p, lambda)` (strengthened to `(p, lambda)`
//!    when the terminal time is positive);
//! 2. transversality: `(p0, p(S))` lies in `-lambda DPsi - K_perp` for the
//!    target's approximating cone `K`, and `-pi` lies in `{0}` while the
//!    energy bound is inactive (nonpositive `pi` is free once it binds);
//! 3. the adjoint equation itself (by re-integration);
//! 4. pointwise maximization of the Hamiltonian over the canonical control
//!    slice;
//! 5. vanishing of the maximized Hamiltonian, which for an inactive energy
//!    bound forces `p . g_i = 0` along the first `m1` control fields;
//! 6. the higher-order orthogonality conditions over the iterated bracket
//!    families, including the mixed brackets with the drift and the
//!    remaining control fields.
//!
//! Every residual is measured relative to the multiplier norm, so scaling
//! a certificate by a positive factor cannot change any verdict.
//!
//! Abnormality search: with `lambda = 0` all conditions are linear in
//! `(p0, p(S), pi)` through the adjoint transition matrix. For each choice
//! of a unit coordinate normalization the resulting homogeneous feasibility
//! problem is solved by an active-set Gauss-Newton minimization of the
//! squared hinge violations; any candidate found is re-verified by the
//! exact checker before it is returned.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::cone::{Cone, ConeError};
use crate::expr::{DiffVar, ExprError, Expression};
use crate::fields::{lie_bracket, BracketError, BracketFamily};
use crate::process::{euclidean_norm, Dynamics, ExtendedProcess, ProcessError};
use crate::target::TargetSpec;

#[derive(Debug, Error)]
pub enum ExtremalError {
    #[error("degenerate cone: {0}")]
    DegenerateCone(String),
    #[error("target is rank deficient: {0}")]
    RankDeficientTarget(String),
    #[error("invalid multiplier: {0}")]
    InvalidMultiplier(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error(transparent)]
    Bracket(#[from] BracketError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// The full problem data an extremality check needs.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dynamics: Dynamics,
    pub cone: Cone,
    pub target: TargetSpec,
    /// Final cost over `(t, x)`.
    pub cost: Expression,
    pub energy_bound: f64,
}

impl Problem {
    pub fn new(
        dynamics: Dynamics,
        cone: Cone,
        target: TargetSpec,
        cost: Expression,
        energy_bound: f64,
    ) -> Result<Self, ExtremalError> {
        if cone.dim() != dynamics.control_dim() {
            return Err(ExtremalError::Dimension(format!(
                "cone dimension {} does not match control dimension {}",
                cone.dim(),
                dynamics.control_dim()
            )));
        }
        if let Some(maxv) = cost.max_var_index() {
            if maxv >= dynamics.state_dim() {
                return Err(ExtremalError::Dimension(format!(
                    "cost uses x{} but the state dimension is {}",
                    maxv + 1,
                    dynamics.state_dim()
                )));
            }
        }
        if energy_bound <= 0.0 {
            return Err(ExtremalError::InvalidMultiplier(
                "energy bound must be positive".into(),
            ));
        }
        Ok(Problem {
            dynamics,
            cone,
            target,
            cost,
            energy_bound,
        })
    }

    pub fn cost_value(&self, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        self.cost.eval(x, t)
    }

    /// Gradient `(d cost/dt, d cost/dx)` at `(t, x)`, length `1 + n`.
    pub fn cost_gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut grad = Vec::with_capacity(1 + x.len());
        grad.push(self.cost.differentiate(DiffVar::Time).eval(x, t)?);
        for j in 0..x.len() {
            grad.push(self.cost.differentiate(DiffVar::State(j)).eval(x, t)?);
        }
        Ok(grad)
    }
}

/// Tangent-space approximating cone of the target at an endpoint: for a
/// level set, `K` is the kernel of the constraint Jacobian and `K_perp`
/// its row space; for a point target `K = {0}`.
#[derive(Debug, Clone)]
pub struct ApproximatingCone {
    pub base_time: f64,
    pub base_state: Vec<f64>,
    /// Orthonormal basis of `K`, one column per direction, in `R^{1+n}`.
    tangent: DMatrix<f64>,
    /// Orthonormal basis of `K_perp`.
    normal: DMatrix<f64>,
}

impl ApproximatingCone {
    pub fn for_target(
        target: &TargetSpec,
        t: f64,
        x: &[f64],
    ) -> Result<Self, ExtremalError> {
        let dim = 1 + x.len();
        let (tangent, normal) = match target {
            TargetSpec::Point { .. } => (
                DMatrix::zeros(dim, 0),
                DMatrix::identity(dim, dim),
            ),
            TargetSpec::LevelSet { constraints } => {
                if constraints.is_empty() {
                    (DMatrix::identity(dim, dim), DMatrix::zeros(dim, 0))
                } else {
                    let rows = target.jacobian_rows(t, x)?;
                    let c = rows.len();
                    let j = DMatrix::from_fn(c, dim, |r, k| rows[r][k]);
                    let svd = j.clone().svd(false, true);
                    let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
                    if c > dim || smallest < 1e-8 {
                        return Err(ExtremalError::RankDeficientTarget(format!(
                            "constraint Jacobian has smallest singular value {smallest:.3e} \
                             for {c} constraints in dimension {dim}"
                        )));
                    }
                    let vt = svd.v_t.unwrap();
                    // Rows of vt span the row space of J, i.e. K_perp.
                    let mut normal = DMatrix::zeros(dim, c);
                    for r in 0..c {
                        for k in 0..dim {
                            normal[(k, r)] = vt[(r, k)];
                        }
                    }
                    let tangent = orthonormal_complement(&normal, dim);
                    (tangent, normal)
                }
            }
        };
        Ok(ApproximatingCone {
            base_time: t,
            base_state: x.to_vec(),
            tangent,
            normal,
        })
    }

    pub fn tangent_dim(&self) -> usize {
        self.tangent.ncols()
    }

    pub fn normal_dim(&self) -> usize {
        self.normal.ncols()
    }

    pub fn tangent_basis(&self) -> &DMatrix<f64> {
        &self.tangent
    }

    pub fn normal_basis(&self) -> &DMatrix<f64> {
        &self.normal
    }

    /// Orthogonal projection onto `K`; its norm is the distance to
    /// `K_perp`.
    pub fn project_tangent(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.tangent.ncols() == 0 {
            return DVector::zeros(v.len());
        }
        &self.tangent * (self.tangent.transpose() * v)
    }
}

/// Extend an orthonormal column set to a full basis and return the added
/// columns (two-pass Gram-Schmidt against coordinate seeds).
fn orthonormal_complement(basis: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = (0..basis.ncols()).map(|c| basis.column(c).into()).collect();
    let keep_from = cols.len();
    for seed in 0..dim {
        let mut v = DVector::zeros(dim);
        v[seed] = 1.0;
        for _ in 0..2 {
            for b in &cols {
                let coef = b.dot(&v);
                v -= b * coef;
            }
        }
        let n = v.norm();
        if n > 1e-10 {
            cols.push(v / n);
        }
        if cols.len() == dim {
            break;
        }
    }
    let added = &cols[keep_from..];
    let mut out = DMatrix::zeros(dim, added.len());
    for (c, v) in added.iter().enumerate() {
        out.set_column(c, v);
    }
    out
}

/// Unmaximized Hamiltonian
/// `H = p0 w0 + p . (f(x) w0 + sum_i g_i(x) w^i) + pi |w|`.
pub fn hamiltonian(
    dynamics: &Dynamics,
    x: &[f64],
    p: &[f64],
    p0: f64,
    pi: f64,
    w0: f64,
    w: &[f64],
) -> Result<f64, ExtremalError> {
    let mut rhs = vec![0.0; x.len()];
    dynamics.extended_rhs_into(x, w0, w, &mut rhs)?;
    let dot: f64 = p.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    Ok(p0 * w0 + dot + pi * euclidean_norm(w))
}

/// Value and argmax of the Hamiltonian over the canonical control slice
/// (the closure of `w0 + |w| = 1`, `w0 > 0`, `w` in the cone): the maximum
/// of the pure-time endpoint `p0 + p . f(x)` and the pure-control value
/// `|proj_C(G^T p)| + pi` obtained from the Moreau decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct MaxHamiltonian {
    pub value: f64,
    pub witness_w0: f64,
    pub witness_w: Vec<f64>,
}

pub fn max_hamiltonian(
    dynamics: &Dynamics,
    cone: &Cone,
    x: &[f64],
    p: &[f64],
    p0: f64,
    pi: f64,
) -> Result<MaxHamiltonian, ExtremalError> {
    let m = dynamics.control_dim();
    let drift_val = dynamics.drift().eval(x)?;
    let drift_part = p0 + p.iter().zip(&drift_val).map(|(a, b)| a * b).sum::<f64>();
    if m == 0 {
        return Ok(MaxHamiltonian {
            value: drift_part,
            witness_w0: 1.0,
            witness_w: Vec::new(),
        });
    }
    if cone.is_degenerate() {
        return Err(ExtremalError::DegenerateCone(
            "control cone is {0} although controls exist".into(),
        ));
    }
    let mut ell = Vec::with_capacity(m);
    for g in dynamics.control_fields() {
        let gv = g.eval(x)?;
        ell.push(p.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>());
    }
    let proj = cone.project(&ell)?;
    let proj_norm = euclidean_norm(&proj);
    let control_part = proj_norm + pi;
    if drift_part >= control_part {
        Ok(MaxHamiltonian {
            value: drift_part,
            witness_w0: 1.0,
            witness_w: vec![0.0; m],
        })
    } else {
        let witness_w = if proj_norm > 0.0 {
            proj.iter().map(|v| v / proj_norm).collect()
        } else {
            // The supremum is approached along cone directions annihilated
            // by the projection; report a deterministic representative.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            cone.unit_directions(0, &mut rng)
                .into_iter()
                .next()
                .unwrap_or_else(|| vec![0.0; m])
        };
        Ok(MaxHamiltonian {
            value: control_part,
            witness_w0: 0.0,
            witness_w,
        })
    }
}

/// Adjoint trajectory on the process grid; `p[last]` is the terminal value.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub s: Vec<f64>,
    pub p: Vec<Vec<f64>>,
}

/// CSV export with header `s,p1..pn`.
pub fn adjoint_csv(path: &AdjointPath) -> String {
    let n = path.p.first().map_or(0, Vec::len);
    let mut out = String::from("s");
    for i in 1..=n {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    for (s, p) in path.s.iter().zip(&path.p) {
        out.push_str(&format!("{s}"));
        for v in p {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Integrate `dp/ds = -p . (Df(y) w0 + sum_i Dg_i(y) w^i)` backward from
/// `p(S) = p_terminal` on the frozen trajectory grid. States at RK4
/// half-steps come from cubic Hermite interpolation of the stored nodes,
/// preserving the integrator's order. The map `p_terminal -> path` is
/// exactly linear.
pub fn integrate_adjoint(
    dynamics: &Dynamics,
    process: &ExtendedProcess,
    p_terminal: &[f64],
) -> Result<AdjointPath, ExtremalError> {
    let n = dynamics.state_dim();
    if p_terminal.len() != n {
        return Err(ExtremalError::Dimension(format!(
            "terminal adjoint has dimension {}, state dimension is {}",
            p_terminal.len(),
            n
        )));
    }
    let nodes = process.s.len();
    let mut p = vec![vec![0.0; n]; nodes];
    p[nodes - 1] = p_terminal.to_vec();

    let mut rhs_a = vec![0.0; n];
    let mut rhs_b = vec![0.0; n];
    for k in (0..nodes - 1).rev() {
        let h = process.s[k + 1] - process.s[k];
        let (w0, w) = process.control.value(process.cell_interval[k]);
        let ya = &process.y[k];
        let yb = &process.y[k + 1];
        dynamics.extended_rhs_into(ya, w0, w, &mut rhs_a)?;
        dynamics.extended_rhs_into(yb, w0, w, &mut rhs_b)?;
        let ymid: Vec<f64> = (0..n)
            .map(|j| 0.5 * (ya[j] + yb[j]) + h / 8.0 * (rhs_a[j] - rhs_b[j]))
            .collect();

        let a_end = dynamics.combined_jacobian(yb, w0, w)?;
        let a_mid = dynamics.combined_jacobian(&ymid, w0, w)?;
        let a_start = dynamics.combined_jacobian(ya, w0, w)?;

        // Backward step: q(tau) = p(s_{k+1} - tau), dq/dtau = A^T q.
        let q = DVector::from_column_slice(&p[k + 1]);
        let k1 = a_end.transpose() * &q;
        let k2 = a_mid.transpose() * (&q + &k1 * (0.5 * h));
        let k3 = a_mid.transpose() * (&q + &k2 * (0.5 * h));
        let k4 = a_start.transpose() * (&q + &k3 * h);
        let next = &q + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ExtremalError::NonFinite(format!(
                "adjoint overflow at s = {}",
                process.s[k]
            )));
        }
        p[k] = next.as_slice().to_vec();
    }
    Ok(AdjointPath {
        s: process.s.clone(),
        p,
    })
}

/// Multipliers `(p0, p(.), pi, lambda)` with the adjoint path attached.
#[derive(Debug, Clone)]
pub struct MultiplierCertificate {
    pub p0: f64,
    pub p_terminal: Vec<f64>,
    pub pi: f64,
    pub lambda: f64,
    pub adjoint: AdjointPath,
}

impl MultiplierCertificate {
    pub fn new(
        dynamics: &Dynamics,
        process: &ExtendedProcess,
        p0: f64,
        p_terminal: Vec<f64>,
        pi: f64,
        lambda: f64,
    ) -> Result<Self, ExtremalError> {
        if pi > 0.0 {
            return Err(ExtremalError::InvalidMultiplier(format!(
                "pi must be nonpositive, got {pi}"
            )));
        }
        if lambda < 0.0 {
            return Err(ExtremalError::InvalidMultiplier(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        let adjoint = integrate_adjoint(dynamics, process, &p_terminal)?;
        Ok(MultiplierCertificate {
            p0,
            p_terminal,
            pi,
            lambda,
            adjoint,
        })
    }

    /// Norm of the full multiplier vector; residuals are reported relative
    /// to it.
    pub fn scale(&self) -> f64 {
        let mut acc = self.p0 * self.p0 + self.pi * self.pi + self.lambda * self.lambda;
        acc += self.p_terminal.iter().map(|v| v * v).sum::<f64>();
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionEntry {
    pub condition: &'static str,
    pub pass: bool,
    /// Relative residual. For `nontriviality` this is the norm that must
    /// stay above the threshold; everywhere else it must stay below.
    pub residual: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
    pub all_pass: bool,
    pub certificate_scale: f64,
    pub tolerance: f64,
}

impl ConditionReport {
    pub fn entry(&self, name: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.condition == name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionParams {
    /// Base tolerance; the effective equality tolerance is
    /// `tol * (1 + trajectory scale)`.
    pub tol: f64,
}

impl Default for ConditionParams {
    fn default() -> Self {
        ConditionParams { tol: 1e-6 }
    }
}

const NONTRIVIALITY_FLOOR: f64 = 1e-6;
const ENERGY_ACTIVE_TOL: f64 = 1e-9;

struct NodeData {
    /// Control of the cell evaluated at each node (the final node reuses
    /// the last cell).
    w0: f64,
    w: Vec<f64>,
    /// True when the node separates two cells of the same control
    /// interval, i.e. lies in the interior of a control interval.
    interior: bool,
}

fn node_controls(z: &ExtendedProcess) -> Vec<NodeData> {
    let nodes = z.s.len();
    (0..nodes)
        .map(|k| {
            let cell = if k < nodes - 1 {
                z.cell_interval[k]
            } else {
                *z.cell_interval.last().unwrap()
            };
            let (w0, w) = z.control.value(cell);
            let interior = k > 0
                && k < nodes - 1
                && z.cell_interval[k - 1] == z.cell_interval[k];
            NodeData {
                w0,
                w: w.to_vec(),
                interior,
            }
        })
        .collect()
}

fn trajectory_scale(z: &ExtendedProcess) -> f64 {
    let mut scale = 0.0f64;
    for k in 0..z.s.len() {
        scale = scale.max(z.y0[k].abs()).max(z.beta[k].abs());
        for v in &z.y[k] {
            scale = scale.max(v.abs());
        }
    }
    scale
}

/// Evaluate conditions 1-6 for a candidate certificate on the process
/// grid. Equality conditions are sampled at every integration node; the
/// mixed bracket condition only at nodes interior to a control interval
/// (its almost-everywhere reading).
pub fn check_conditions(
    problem: &Problem,
    z: &ExtendedProcess,
    family_b0: &BracketFamily,
    family_b1: &BracketFamily,
    cert: &MultiplierCertificate,
    params: &ConditionParams,
) -> Result<ConditionReport, ExtremalError> {
    let dynamics = &problem.dynamics;
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    let m1 = problem.cone.m1();
    let (y0_end, y_end, beta_end) = z.endpoint();
    let approx = ApproximatingCone::for_target(&problem.target, y0_end, y_end)?;
    if cert.adjoint.s.len() != z.s.len() {
        return Err(ExtremalError::Dimension(
            "certificate adjoint grid does not match the process grid".into(),
        ));
    }

    let scale = cert.scale().max(f64::MIN_POSITIVE);
    let tol_eff = params.tol * (1.0 + trajectory_scale(z));
    let energy_inactive = beta_end < problem.energy_bound - ENERGY_ACTIVE_TOL;
    let node_ctrl = node_controls(z);
    let nodes = z.s.len();
    let mut entries = Vec::new();

    // 1. Nontriviality.
    {
        let full = (cert.p0 * cert.p0
            + cert.lambda * cert.lambda
            + cert.p_terminal.iter().map(|v| v * v).sum::<f64>())
        .sqrt()
            / scale;
        let strengthened_applies = y0_end > tol_eff;
        let strengthened = (cert.lambda * cert.lambda
            + cert.p_terminal.iter().map(|v| v * v).sum::<f64>())
        .sqrt()
            / scale;
        let value = if strengthened_applies {
            full.min(strengthened)
        } else {
            full
        };
        entries.push(ConditionEntry {
            condition: "nontriviality",
            pass: value >= NONTRIVIALITY_FLOOR,
            residual: value,
            threshold: NONTRIVIALITY_FLOOR,
            worst_s: None,
        });
    }

    // 2. Transversality.
    {
        let grad = problem.cost_gradient(y0_end, y_end)?;
        let mut v = DVector::zeros(1 + n);
        v[0] = cert.p0 + cert.lambda * grad[0];
        for j in 0..n {
            v[1 + j] = cert.p_terminal[j] + cert.lambda * grad[1 + j];
        }
        let mut residual = approx.project_tangent(&v).norm() / scale;
        if energy_inactive {
            residual = residual.max(cert.pi.abs() / scale);
        }
        entries.push(ConditionEntry {
            condition: "transversality",
            pass: residual <= tol_eff,
            residual,
            threshold: tol_eff,
            worst_s: None,
        });
    }

    // 3. Adjoint consistency (the state part holds by construction of the
    // simulated process).
    {
        let recomputed = integrate_adjoint(dynamics, z, &cert.p_terminal)?;
        let mut residual = 0.0f64;
        let mut worst = z.s[0];
        for k in 0..nodes {
            for j in 0..n {
                let d = (recomputed.p[k][j] - cert.adjoint.p[k][j]).abs();
                if d > residual {
                    residual = d;
                    worst = z.s[k];
                }
            }
        }
        residual /= scale;
        entries.push(ConditionEntry {
            condition: "adjoint_consistency",
            pass: residual <= tol_eff,
            residual,
            threshold: tol_eff,
            worst_s: Some(worst),
        });
    }

    // 4 and 5. Maximization and vanishing of the maximized Hamiltonian.
    {
        let mut max_resid = 0.0f64;
        let mut max_worst = z.s[0];
        let mut vanish_resid = 0.0f64;
        let mut vanish_worst = z.s[0];
        for k in 0..nodes {
            let nd = &node_ctrl[k];
            let p_k = &cert.adjoint.p[k];
            let h_here =
                hamiltonian(dynamics, &z.y[k], p_k, cert.p0, cert.pi, nd.w0, &nd.w)?;
            let h_max =
                max_hamiltonian(dynamics, &problem.cone, &z.y[k], p_k, cert.p0, cert.pi)?;
            let r4 = (h_here - h_max.value).abs() / scale;
            if r4 > max_resid {
                max_resid = r4;
                max_worst = z.s[k];
            }
            let r5 = h_max.value.abs() / scale;
            if r5 > vanish_resid {
                vanish_resid = r5;
                vanish_worst = z.s[k];
            }
        }
        entries.push(ConditionEntry {
            condition: "maximization",
            pass: max_resid <= tol_eff,
            residual: max_resid,
            threshold: tol_eff,
            worst_s: Some(max_worst),
        });
        entries.push(ConditionEntry {
            condition: "hamiltonian_vanishing",
            pass: vanish_resid <= tol_eff,
            residual: vanish_resid,
            threshold: tol_eff,
            worst_s: Some(vanish_worst),
        });
    }

    // 5'. p . g_i = 0 along the first m1 control fields (inactive bound).
    {
        let mut residual = 0.0f64;
        let mut worst = z.s[0];
        if energy_inactive && m1 > 0 {
            for k in 0..nodes {
                let p_k = &cert.adjoint.p[k];
                for g in &dynamics.control_fields()[..m1] {
                    let gv = g.eval(&z.y[k])?;
                    let r = p_k
                        .iter()
                        .zip(&gv)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .abs()
                        / scale;
                    if r > residual {
                        residual = r;
                        worst = z.s[k];
                    }
                }
            }
        }
        entries.push(ConditionEntry {
            condition: "control_orthogonality",
            pass: residual <= tol_eff,
            residual,
            threshold: tol_eff,
            worst_s: Some(worst),
        });
    }

    // 6. Higher-order orthogonality over the bracket families.
    {
        let g_tuple: Vec<&crate::expr::VectorField> =
            dynamics.control_fields()[..m1.min(m)].iter().collect();
        let mut b0_resid = 0.0f64;
        let mut b0_worst = z.s[0];
        let mut b1_resid = 0.0f64;
        let mut b1_worst = z.s[0];
        if energy_inactive {
            for entry in &family_b0.entries {
                let field = entry.to_field(&g_tuple)?;
                for k in 0..nodes {
                    let val = field.eval(&z.y[k])?;
                    let r = cert.adjoint.p[k]
                        .iter()
                        .zip(&val)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .abs()
                        / scale;
                    if r > b0_resid {
                        b0_resid = r;
                        b0_worst = z.s[k];
                    }
                }
            }
            for entry in &family_b1.entries {
                let field = entry.to_field(&g_tuple)?;
                let drift_bracket = lie_bracket(dynamics.drift(), &field)?;
                let tail_brackets: Vec<_> = dynamics.control_fields()[m1..]
                    .iter()
                    .map(|gj| lie_bracket(gj, &field))
                    .collect::<Result<_, _>>()?;
                for k in 0..nodes {
                    let nd = &node_ctrl[k];
                    if !nd.interior {
                        continue;
                    }
                    let p_k = &cert.adjoint.p[k];
                    let mut val = 0.0;
                    let fb = drift_bracket.eval(&z.y[k])?;
                    val += nd.w0 * p_k.iter().zip(&fb).map(|(a, b)| a * b).sum::<f64>();
                    for (j, gb) in tail_brackets.iter().enumerate() {
                        let wj = nd.w[m1 + j];
                        if wj != 0.0 {
                            let gv = gb.eval(&z.y[k])?;
                            val += wj * p_k.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    let r = val.abs() / scale;
                    if r > b1_resid {
                        b1_resid = r;
                        b1_worst = z.s[k];
                    }
                }
            }
        }
        entries.push(ConditionEntry {
            condition: "bracket_orthogonality",
            pass: b0_resid <= tol_eff,
            residual: b0_resid,
            threshold: tol_eff,
            worst_s: Some(b0_worst),
        });
        entries.push(ConditionEntry {
            condition: "mixed_bracket_orthogonality",
            pass: b1_resid <= tol_eff,
            residual: b1_resid,
            threshold: tol_eff,
            worst_s: Some(b1_worst),
        });
    }

    let all_pass = entries.iter().all(|e| e.pass);
    Ok(ConditionReport {
        entries,
        all_pass,
        certificate_scale: cert.scale(),
        tolerance: tol_eff,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    /// Feasibility acceptance threshold; the gray band for an inconclusive
    /// classification is `(tol, 10 tol]`.
    pub tol: f64,
    /// Convergence target of the hinge minimization.
    pub slack: f64,
    /// Sphere directions sampled inside the cone, on top of the generators.
    pub extra_directions: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub condition_tol: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            tol: 1e-6,
            slack: 1e-8,
            extra_directions: 64,
            seed: 0,
            max_iterations: 200,
            condition_tol: 1e-6,
        }
    }
}

/// Result of one coordinate normalization of the abnormality search.
#[derive(Debug, Clone, Serialize)]
pub struct NormalizationOutcome {
    /// Coordinate of `(p0, p_1..p_n, pi)` fixed to `sign`.
    pub coordinate: usize,
    pub sign: f64,
    /// Scaled maximal constraint violation of the best point found
    /// (1.0 when the normalization is structurally infeasible).
    pub residual: f64,
    pub certified: bool,
    pub skipped: bool,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub certificate: Option<MultiplierCertificate>,
    pub report: Option<ConditionReport>,
    pub outcomes: Vec<NormalizationOutcome>,
}

impl SearchOutcome {
    pub fn min_residual(&self) -> f64 {
        self.outcomes
            .iter()
            .filter(|o| !o.skipped)
            .map(|o| o.residual)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Search for an abnormal certificate (`lambda = 0`). All constraints are
/// linear and homogeneous in `(p0, p(S), pi)`; the search fixes one
/// coordinate to +/-1 at a time (in index order), solves the resulting
/// feasibility problem on grid-sampled constraints, and accepts the first
/// candidate whose full condition report passes.
pub fn find_abnormal(
    problem: &Problem,
    z: &ExtendedProcess,
    family_b0: &BracketFamily,
    family_b1: &BracketFamily,
    params: &SearchParams,
) -> Result<SearchOutcome, ExtremalError> {
    let dynamics = &problem.dynamics;
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    let m1 = problem.cone.m1();
    let (y0_end, y_end, beta_end) = z.endpoint();
    let approx = ApproximatingCone::for_target(&problem.target, y0_end, y_end)?;
    let energy_inactive = beta_end < problem.energy_bound - ENERGY_ACTIVE_TOL;
    let pi_free = !energy_inactive;
    let q = approx.normal_dim(); // (p0, p_T) = Q c, c in R^q
    let dim = q + usize::from(pi_free);
    let nodes = z.s.len();
    let node_ctrl = node_controls(z);

    let mut outcomes = Vec::new();
    let record_all_infeasible = |outcomes: &mut Vec<NormalizationOutcome>| {
        for coordinate in 0..=(n + 1) {
            for sign in [1.0, -1.0] {
                outcomes.push(NormalizationOutcome {
                    coordinate,
                    sign,
                    residual: 1.0,
                    certified: false,
                    skipped: coordinate == n + 1 && !pi_free,
                });
            }
        }
    };
    if dim == 0 {
        record_all_infeasible(&mut outcomes);
        return Ok(SearchOutcome {
            certificate: None,
            report: None,
            outcomes,
        });
    }

    // Adjoint transition: p(s_k) = T_k p_terminal, columns integrated from
    // the coordinate basis.
    let mut transition: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); nodes];
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let path = integrate_adjoint(dynamics, z, &e)?;
        for k in 0..nodes {
            for r in 0..n {
                transition[k][(r, i)] = path.p[k][r];
            }
        }
    }

    let q_basis = approx.normal_basis(); // (1+n) x q
    let q_time = q_basis.rows(0, 1).clone_owned(); // p0 coefficients
    let q_state = if n > 0 {
        q_basis.rows(1, n).clone_owned()
    } else {
        DMatrix::zeros(0, q)
    };

    // Row builders in the reduced variable xi = (c, [pi]).
    let row_from_field = |k: usize, v: &DVector<f64>, w0_coef: f64, pi_coef: f64| -> DVector<f64> {
        // w0_coef * p0 + p(s_k) . v + pi_coef * pi as a function of xi.
        let tv = transition[k].transpose() * v; // acts on p_terminal
        let mut row = DVector::zeros(dim);
        for c in 0..q {
            let mut acc = w0_coef * q_time[(0, c)];
            for r in 0..n {
                acc += tv[r] * q_state[(r, c)];
            }
            row[c] = acc;
        }
        if pi_free {
            row[q] = pi_coef;
        }
        row
    };

    let mut eq_rows: Vec<DVector<f64>> = Vec::new();
    let mut ineq_rows: Vec<DVector<f64>> = Vec::new();

    // Field values cached per node.
    let mut drift_vals = Vec::with_capacity(nodes);
    let mut control_vals: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nodes);
    for k in 0..nodes {
        drift_vals.push(dynamics.drift().eval(&z.y[k])?);
        control_vals.push(
            dynamics
                .control_fields()
                .iter()
                .map(|g| g.eval(&z.y[k]))
                .collect::<Result<_, _>>()?,
        );
    }

    // Hamiltonian vanishing along the extremal: H(w_ref(s)) = 0.
    for k in 0..nodes {
        let nd = &node_ctrl[k];
        let mut v = DVector::zeros(n);
        for r in 0..n {
            let mut acc = nd.w0 * drift_vals[k][r];
            for (i, gv) in control_vals[k].iter().enumerate() {
                acc += nd.w[i] * gv[r];
            }
            v[r] = acc;
        }
        eq_rows.push(row_from_field(k, &v, nd.w0, euclidean_norm(&nd.w)));
    }

    if energy_inactive {
        // p . g_i = 0, i <= m1.
        for k in 0..nodes {
            for i in 0..m1 {
                let v = DVector::from_column_slice(&control_vals[k][i]);
                eq_rows.push(row_from_field(k, &v, 0.0, 0.0));
            }
        }
        // Bracket families.
        let g_tuple: Vec<&crate::expr::VectorField> =
            dynamics.control_fields()[..m1.min(m)].iter().collect();
        for entry in &family_b0.entries {
            let field = entry.to_field(&g_tuple)?;
            for k in 0..nodes {
                let v = DVector::from_column_slice(&field.eval(&z.y[k])?);
                eq_rows.push(row_from_field(k, &v, 0.0, 0.0));
            }
        }
        for entry in &family_b1.entries {
            let field = entry.to_field(&g_tuple)?;
            let drift_bracket = lie_bracket(dynamics.drift(), &field)?;
            let tail_brackets: Vec<_> = dynamics.control_fields()[m1..]
                .iter()
                .map(|gj| lie_bracket(gj, &field))
                .collect::<Result<Vec<_>, _>>()?;
            for k in 0..nodes {
                let nd = &node_ctrl[k];
                if !nd.interior {
                    continue;
                }
                let fb = drift_bracket.eval(&z.y[k])?;
                let mut v = DVector::from_iterator(n, fb.iter().map(|x| nd.w0 * x));
                for (j, gb) in tail_brackets.iter().enumerate() {
                    let gv = gb.eval(&z.y[k])?;
                    for r in 0..n {
                        v[r] += nd.w[m1 + j] * gv[r];
                    }
                }
                eq_rows.push(row_from_field(k, &v, 0.0, 0.0));
            }
        }
    }

    // Maximization, discretized: H <= 0 at the pure-time vertex and along
    // sampled unit directions of the cone.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);
    let dirs = if m > 0 {
        problem.cone.unit_directions(params.extra_directions, &mut rng)
    } else {
        Vec::new()
    };
    for k in 0..nodes {
        let v = DVector::from_column_slice(&drift_vals[k]);
        ineq_rows.push(row_from_field(k, &v, 1.0, 0.0));
        for d in &dirs {
            let mut v = DVector::zeros(n);
            for r in 0..n {
                let mut acc = 0.0;
                for (i, gv) in control_vals[k].iter().enumerate() {
                    acc += d[i] * gv[r];
                }
                v[r] = acc;
            }
            ineq_rows.push(row_from_field(k, &v, 0.0, 1.0));
        }
    }
    if pi_free {
        let mut row = DVector::zeros(dim);
        row[q] = 1.0;
        ineq_rows.push(row);
    }

    normalize_and_dedup(&mut eq_rows);
    normalize_and_dedup(&mut ineq_rows);

    // Coordinate extraction rows of (p0, p_1..p_n, pi) in xi coordinates.
    let coord_row = |j: usize| -> DVector<f64> {
        let mut row = DVector::zeros(dim);
        if j <= n {
            for c in 0..q {
                row[c] = q_basis[(j, c)];
            }
        } else if pi_free {
            row[q] = 1.0;
        }
        row
    };

    for coordinate in 0..=(n + 1) {
        for sign in [1.0, -1.0] {
            if coordinate == n + 1 && !pi_free {
                outcomes.push(NormalizationOutcome {
                    coordinate,
                    sign,
                    residual: 1.0,
                    certified: false,
                    skipped: true,
                });
                continue;
            }
            let nrm_row = coord_row(coordinate);
            let candidate = solve_normalized(&eq_rows, &ineq_rows, &nrm_row, sign, params);
            let Some(xi) = candidate else {
                outcomes.push(NormalizationOutcome {
                    coordinate,
                    sign,
                    residual: 1.0,
                    certified: false,
                    skipped: false,
                });
                continue;
            };

            // Reconstruct multipliers and measure the true violation.
            let c = xi.rows(0, q).clone_owned();
            let tp = q_basis * &c;
            let p0 = tp[0];
            let p_terminal: Vec<f64> = (0..n).map(|r| tp[1 + r]).collect();
            let pi = if pi_free { xi[q].min(0.0) } else { 0.0 };
            let mult_norm = (p0 * p0
                + pi * pi
                + p_terminal.iter().map(|v| v * v).sum::<f64>())
            .sqrt()
            .max(1.0);
            let mut violation = 0.0f64;
            for row in &eq_rows {
                violation = violation.max(row.dot(&xi).abs());
            }
            for row in &ineq_rows {
                violation = violation.max(row.dot(&xi).max(0.0));
            }
            let residual = violation / mult_norm;
            let mut certified = false;
            if residual <= params.tol {
                let cert = MultiplierCertificate::new(
                    dynamics,
                    z,
                    p0,
                    p_terminal.clone(),
                    pi,
                    0.0,
                )?;
                let report = check_conditions(
                    problem,
                    z,
                    family_b0,
                    family_b1,
                    &cert,
                    &ConditionParams {
                        tol: params.condition_tol,
                    },
                )?;
                if report.all_pass {
                    certified = true;
                    outcomes.push(NormalizationOutcome {
                        coordinate,
                        sign,
                        residual,
                        certified,
                        skipped: false,
                    });
                    return Ok(SearchOutcome {
                        certificate: Some(cert),
                        report: Some(report),
                        outcomes,
                    });
                }
            }
            outcomes.push(NormalizationOutcome {
                coordinate,
                sign,
                residual,
                certified,
                skipped: false,
            });
        }
    }

    Ok(SearchOutcome {
        certificate: None,
        report: None,
        outcomes,
    })
}

fn normalize_and_dedup(rows: &mut Vec<DVector<f64>>) {
    for row in rows.iter_mut() {
        let n = row.norm();
        if n > 1e-14 {
            *row /= n;
        } else {
            row.fill(0.0);
        }
    }
    rows.retain(|r| r.norm() > 0.5);
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y).unwrap() {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    rows.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12));
}

/// Solve one normalized feasibility problem: minimize the squared equality
/// residuals plus squared hinge violations of the inequalities over the
/// affine slice `nrm_row . xi = sign`, by damped Gauss-Newton. Returns the
/// best point found, or None when the normalization is structurally
/// unreachable (zero coordinate row).
fn solve_normalized(
    eq_rows: &[DVector<f64>],
    ineq_rows: &[DVector<f64>],
    nrm_row: &DVector<f64>,
    sign: f64,
    params: &SearchParams,
) -> Option<DVector<f64>> {
    let dim = nrm_row.len();
    let vn2 = nrm_row.norm_squared();
    if vn2 <= 1e-20 {
        return None;
    }
    let xi0 = nrm_row * (sign / vn2);
    let unit = DMatrix::from_column_slice(dim, 1, (nrm_row / nrm_row.norm()).as_slice());
    let z_basis = orthonormal_complement(&unit, dim);
    let free = z_basis.ncols();

    let g_of = |xi: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for row in eq_rows {
            let v = row.dot(xi);
            acc += v * v;
        }
        for row in ineq_rows {
            let v = row.dot(xi);
            if v > 0.0 {
                acc += v * v;
            }
        }
        acc
    };
    let violation_of = |xi: &DVector<f64>| -> f64 {
        let mut worst = 0.0f64;
        for row in eq_rows {
            worst = worst.max(row.dot(xi).abs());
        }
        for row in ineq_rows {
            worst = worst.max(row.dot(xi).max(0.0));
        }
        worst
    };

    let mut zeta = DVector::zeros(free);
    let mut xi = xi0.clone();
    let mut g = g_of(&xi);
    for _ in 0..params.max_iterations {
        if violation_of(&xi) <= params.slack || free == 0 {
            break;
        }
        let mut grad = DVector::zeros(free);
        let mut hess = DMatrix::zeros(free, free);
        let mut add_term = |row: &DVector<f64>, val: f64| {
            let bz = z_basis.transpose() * row;
            grad += &bz * (2.0 * val);
            hess += &bz * bz.transpose() * 2.0;
        };
        for row in eq_rows {
            add_term(row, row.dot(&xi));
        }
        for row in ineq_rows {
            let v = row.dot(&xi);
            if v > 0.0 {
                add_term(row, v);
            }
        }
        for i in 0..free {
            hess[(i, i)] += 1e-12;
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .unwrap_or_else(|| {
                hess.svd(true, true)
                    .solve(&grad, 1e-14)
                    .unwrap_or_else(|_| DVector::zeros(free))
            });
        if step.norm() <= 1e-16 {
            break;
        }
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial_zeta = &zeta - &step * alpha;
            let trial_xi = &xi0 + z_basis.clone() * &trial_zeta;
            let tg = g_of(&trial_xi);
            if tg < g * (1.0 - 1e-12) - 1e-300 {
                zeta = trial_zeta;
                xi = trial_xi;
                g = tg;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some(xi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Normality {
    Normal,
    Abnormal,
    Inconclusive,
}

#[derive(Debug)]
pub struct NormalityReport {
    pub verdict: Normality,
    pub min_residual: f64,
    pub tol: f64,
    pub certificate: Option<MultiplierCertificate>,
    pub condition_report: Option<ConditionReport>,
    pub outcomes: Vec<NormalizationOutcome>,
}

/// Verdict banding: a verified certificate is abnormal; otherwise residuals
/// inside `(tol, 10 tol]` (or unverified candidates below `tol`) are
/// inconclusive, and anything farther is normal.
pub fn banding_verdict(min_residual: f64, certified: bool, tol: f64) -> Normality {
    if certified {
        Normality::Abnormal
    } else if min_residual <= 10.0 * tol {
        Normality::Inconclusive
    } else {
        Normality::Normal
    }
}

pub fn classify_normality(
    problem: &Problem,
    z: &ExtendedProcess,
    family_b0: &BracketFamily,
    family_b1: &BracketFamily,
    params: &SearchParams,
) -> Result<NormalityReport, ExtremalError> {
    let outcome = find_abnormal(problem, z, family_b0, family_b1, params)?;
    let min_residual = outcome.min_residual();
    let verdict = banding_verdict(min_residual, outcome.certificate.is_some(), params.tol);
    Ok(NormalityReport {
        verdict,
        min_residual,
        tol: params.tol,
        certificate: outcome.certificate,
        condition_report: outcome.report,
        outcomes: outcome.outcomes,
    })
}
