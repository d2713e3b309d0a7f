//! The L1 control distances `d` and `d_tilde` between extended processes,
//! trajectory sup-distances, and the Gronwall-type stability certificate
//! bounding trajectory deviation by control distance.
//!
//! Both distances are exact piecewise-constant integrals over the merged
//! breakpoint grid, with `|.|` on control values the Euclidean norm. `d`
//! truncates the integral at the shorter horizon; `d_tilde` integrates to
//! the longer horizon with controls extended by zero.

use serde::Serialize;
use thiserror::Error;

use crate::expr::ExprError;
use crate::process::{euclidean_norm, ControlSignal, Dynamics, ExtendedProcess};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("trajectory leaves the declared state box: {0}")]
    BoxViolation(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// A control distance split into its defining parts;
/// `total = horizon_gap + w0_part + w_part` exactly.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub total: f64,
    pub horizon_gap: f64,
    pub integral: f64,
    pub w0_part: f64,
    pub w_part: f64,
}

fn integral_parts(a: &ControlSignal, b: &ControlSignal, upto: f64) -> Result<(f64, f64), MetricError> {
    if a.control_dim() != b.control_dim() {
        return Err(MetricError::Dimension(format!(
            "controls of dimension {} and {}",
            a.control_dim(),
            b.control_dim()
        )));
    }
    let mut cuts: Vec<f64> = Vec::new();
    for &p in a.breakpoints().iter().chain(b.breakpoints()) {
        if p < upto {
            cuts.push(p);
        }
    }
    cuts.push(0.0);
    cuts.push(upto);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();

    let m = a.control_dim();
    let zero = vec![0.0; m];
    let mut w0_part = 0.0;
    let mut w_part = 0.0;
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (a0, aw) = if mid < a.horizon() {
            a.value(a.index_at(mid))
        } else {
            (0.0, zero.as_slice())
        };
        let (b0, bw) = if mid < b.horizon() {
            b.value(b.index_at(mid))
        } else {
            (0.0, zero.as_slice())
        };
        let dw: Vec<f64> = aw.iter().zip(bw).map(|(x, y)| x - y).collect();
        w0_part += (hi - lo) * (a0 - b0).abs();
        w_part += (hi - lo) * euclidean_norm(&dw);
    }
    Ok((w0_part, w_part))
}

/// `d(z1, z2) = |S1 - S2| + integral over [0, S1 /\ S2] of
/// |w0_1 - w0_2| + |w_1 - w_2|`.
pub fn dist_d_controls(a: &ControlSignal, b: &ControlSignal) -> Result<DistanceReport, MetricError> {
    let horizon_gap = (a.horizon() - b.horizon()).abs();
    let (w0_part, w_part) = integral_parts(a, b, a.horizon().min(b.horizon()))?;
    Ok(DistanceReport {
        total: horizon_gap + w0_part + w_part,
        horizon_gap,
        integral: w0_part + w_part,
        w0_part,
        w_part,
    })
}

/// `d_tilde(z1, z2) = |S1 - S2| + integral over [0, S1 \/ S2]` with both
/// controls extended by zero beyond their horizons.
pub fn dist_dtilde_controls(
    a: &ControlSignal,
    b: &ControlSignal,
) -> Result<DistanceReport, MetricError> {
    let horizon_gap = (a.horizon() - b.horizon()).abs();
    let (w0_part, w_part) = integral_parts(a, b, a.horizon().max(b.horizon()))?;
    Ok(DistanceReport {
        total: horizon_gap + w0_part + w_part,
        horizon_gap,
        integral: w0_part + w_part,
        w0_part,
        w_part,
    })
}

pub fn dist_d(z1: &ExtendedProcess, z2: &ExtendedProcess) -> Result<DistanceReport, MetricError> {
    dist_d_controls(&z1.control, &z2.control)
}

pub fn dist_dtilde(
    z1: &ExtendedProcess,
    z2: &ExtendedProcess,
) -> Result<DistanceReport, MetricError> {
    dist_dtilde_controls(&z1.control, &z2.control)
}

/// Axis-aligned state box used for sampling field bounds.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= lo - slack && *v <= hi + slack)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Deterministic sample set: a per-axis lattice plus seeded uniform
    /// draws, always including the corners for low dimensions.
    pub fn sample_points(&self, random_count: usize) -> Vec<Vec<f64>> {
        use rand::Rng;
        use rand::SeedableRng;
        let n = self.dim();
        let mut pts = Vec::new();
        // Lattice with roughly 4096 points total.
        let per_axis = ((4096f64).powf(1.0 / n.max(1) as f64).floor() as usize).clamp(2, 9);
        let mut idx = vec![0usize; n];
        loop {
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    let th = idx[i] as f64 / (per_axis - 1) as f64;
                    self.lo[i] + th * (self.hi[i] - self.lo[i])
                })
                .collect();
            pts.push(p);
            let mut carry = 0;
            while carry < n {
                idx[carry] += 1;
                if idx[carry] < per_axis {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
            if carry == n {
                break;
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0b0c5);
        for _ in 0..random_count {
            pts.push(
                (0..n)
                    .map(|i| rng.random_range(self.lo[i]..=self.hi[i]))
                    .collect(),
            );
        }
        pts
    }
}

/// Constants and the three trajectory estimates of the Gronwall-type
/// stability bound: with `M` a sampled bound on the field magnitudes, `L`
/// on their Jacobians, and `R = y0(S) + beta(S)` of the reference process,
///
/// ```text
/// sup |y0 - y0_ref|   <= d_tilde
/// sup |y  - y_ref |   <= M exp(L R) d_tilde
/// sup |beta - b_ref|  <= d_tilde
/// ```
///
/// Sup-norms are taken over the merged integration grids with constant
/// extension beyond the horizons; the grid resolution is absorbed into a
/// relative slack of 1e-6 on each comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GronwallReport {
    pub m_const: f64,
    pub l_const: f64,
    pub r_ref: f64,
    pub dtilde: DistanceReport,
    pub sup_y0: f64,
    pub sup_y: f64,
    pub sup_beta: f64,
    pub bound_y: f64,
    /// Sharper right-hand sides: the separate `w0` and `w` integrals.
    pub int_w0: f64,
    pub int_w: f64,
    pub pass_y0: bool,
    pub pass_y: bool,
    pub pass_beta: bool,
    pub pass: bool,
}

const GRID_SLACK: f64 = 1e-6;

/// Check the three stability inequalities for `z` against the reference
/// `z_ref`, with field bounds sampled over `state_box`. Errors if either
/// trajectory leaves the box.
pub fn gronwall_certificate(
    dynamics: &Dynamics,
    z: &ExtendedProcess,
    z_ref: &ExtendedProcess,
    state_box: &StateBox,
) -> Result<GronwallReport, MetricError> {
    if state_box.dim() != dynamics.state_dim() {
        return Err(MetricError::Dimension(format!(
            "state box of dimension {}, dynamics {}",
            state_box.dim(),
            dynamics.state_dim()
        )));
    }
    for (which, proc) in [("z", z), ("z_ref", z_ref)] {
        for (k, yk) in proc.y.iter().enumerate() {
            if !state_box.contains(yk, 1e-9) {
                return Err(MetricError::BoxViolation(format!(
                    "{which} exits the box at s = {}",
                    proc.s[k]
                )));
            }
        }
    }

    let (m_const, l_const) = field_bounds(dynamics, state_box)?;
    let (m0, mw) = z_ref.control.mass();
    let r_ref = m0 + mw;
    let dtilde = dist_dtilde(z, z_ref)?;

    // Merged node set, constant extension beyond each horizon.
    let mut nodes: Vec<f64> = z.s.iter().chain(z_ref.s.iter()).copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    let mut sup_y0 = 0.0f64;
    let mut sup_y = 0.0f64;
    let mut sup_beta = 0.0f64;
    for &s in &nodes {
        let (a0, a, ab) = z.sample_at(s);
        let (b0, b, bb) = z_ref.sample_at(s);
        sup_y0 = sup_y0.max((a0 - b0).abs());
        sup_beta = sup_beta.max((ab - bb).abs());
        let dy: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        sup_y = sup_y.max(euclidean_norm(&dy));
    }

    let bound_y = m_const * (l_const * r_ref).exp() * dtilde.total;
    let pass_y0 = sup_y0 <= dtilde.total + GRID_SLACK * (1.0 + dtilde.total);
    let pass_y = sup_y <= bound_y + GRID_SLACK * (1.0 + bound_y);
    let pass_beta = sup_beta <= dtilde.total + GRID_SLACK * (1.0 + dtilde.total);
    Ok(GronwallReport {
        m_const,
        l_const,
        r_ref,
        int_w0: dtilde.w0_part,
        int_w: dtilde.w_part,
        dtilde,
        sup_y0,
        sup_y,
        sup_beta,
        bound_y,
        pass_y0,
        pass_y,
        pass_beta,
        pass: pass_y0 && pass_y && pass_beta,
    })
}

/// Sampled sup over the box of the field magnitudes and Jacobian norms,
/// combined so that `|f(x)Δw0 + Σ g_i(x)Δw_i| <= M(|Δw0| + |Δw|)` and the
/// Lipschitz kernel is bounded by `L(w0 + |w|)` (Cauchy-Schwarz over the
/// control fields).
fn field_bounds(dynamics: &Dynamics, state_box: &StateBox) -> Result<(f64, f64), MetricError> {
    use nalgebra::DMatrix;
    let n = dynamics.state_dim();
    let mut m_const = 0.0f64;
    let mut l_const = 0.0f64;
    let drift_jac = dynamics.drift().jacobian();
    let control_jacs: Vec<_> = dynamics
        .control_fields()
        .iter()
        .map(|g| g.jacobian())
        .collect();
    for p in state_box.sample_points(1024) {
        let fval = dynamics.drift().eval(&p)?;
        m_const = m_const.max(euclidean_norm(&fval));
        let mut g_sq = 0.0;
        for g in dynamics.control_fields() {
            let gv = g.eval(&p)?;
            g_sq += gv.iter().map(|v| v * v).sum::<f64>();
        }
        m_const = m_const.max(g_sq.sqrt());

        let spectral = |rows: &Vec<Vec<crate::expr::Expression>>| -> Result<f64, MetricError> {
            let vals = crate::expr::eval_matrix(rows, &p)?;
            let mat = DMatrix::from_fn(n, n, |i, j| vals[i][j]);
            Ok(mat.svd(false, false).singular_values.max())
        };
        l_const = l_const.max(spectral(&drift_jac)?);
        let mut lg_sq = 0.0;
        for jac in &control_jacs {
            let s = spectral(jac)?;
            lg_sq += s * s;
        }
        l_const = l_const.max(lg_sq.sqrt());
    }
    Ok((m_const, l_const))
}
