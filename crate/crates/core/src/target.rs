//! Endpoint target sets in `(t, x)` space.
//!
//! A target is either a single point or the zero set of smooth constraint
//! expressions over `(t, x1..xn)` with full row rank at the reference
//! endpoint. The tangent-space approximating cone derived from a target
//! lives in [`crate::extremal`].

use serde::Serialize;

use crate::expr::{DiffVar, ExprError, Expression};

#[derive(Debug, Clone)]
pub enum TargetSpec {
    /// The singleton `{(t*, x*)}`.
    Point { time: f64, state: Vec<f64> },
    /// `{(t, x) : Phi_r(t, x) = 0 for all r}`.
    LevelSet { constraints: Vec<Expression> },
}

/// Summary of a target for reports.
#[derive(Debug, Clone, Serialize)]
pub struct TargetSummary {
    pub kind: &'static str,
    pub constraints: usize,
}

impl TargetSpec {
    pub fn point(time: f64, state: Vec<f64>) -> Self {
        TargetSpec::Point { time, state }
    }

    pub fn level_set(constraints: Vec<Expression>) -> Self {
        TargetSpec::LevelSet { constraints }
    }

    pub fn summary(&self) -> TargetSummary {
        match self {
            TargetSpec::Point { .. } => TargetSummary {
                kind: "point",
                constraints: 0,
            },
            TargetSpec::LevelSet { constraints } => TargetSummary {
                kind: "level_set",
                constraints: constraints.len(),
            },
        }
    }

    /// Constraint Jacobian rows `(dPhi/dt, dPhi/dx1, ..)` at `(t, x)`.
    pub fn jacobian_rows(&self, t: f64, x: &[f64]) -> Result<Vec<Vec<f64>>, ExprError> {
        match self {
            TargetSpec::Point { .. } => Ok(Vec::new()),
            TargetSpec::LevelSet { constraints } => {
                let n = x.len();
                constraints
                    .iter()
                    .map(|phi| {
                        let mut row = Vec::with_capacity(1 + n);
                        row.push(phi.differentiate(DiffVar::Time).eval(x, t)?);
                        for j in 0..n {
                            row.push(phi.differentiate(DiffVar::State(j)).eval(x, t)?);
                        }
                        Ok(row)
                    })
                    .collect()
            }
        }
    }

    /// Euclidean distance from `(t, x)` to the target, together with a flag
    /// telling whether the level-set projection iteration converged (point
    /// targets are exact). For level sets the distance is computed by
    /// Gauss-Newton projection onto the zero set, which is accurate near
    /// regular points; if the iteration stalls the first-order estimate is
    /// returned with `converged = false`.
    pub fn distance(&self, t: f64, x: &[f64]) -> Result<(f64, bool), ExprError> {
        match self {
            TargetSpec::Point { time, state } => {
                let mut acc = (t - time) * (t - time);
                if state.len() != x.len() {
                    return Err(ExprError::Shape(format!(
                        "target state has dimension {}, endpoint {}",
                        state.len(),
                        x.len()
                    )));
                }
                for (a, b) in x.iter().zip(state) {
                    acc += (a - b) * (a - b);
                }
                Ok((acc.sqrt(), true))
            }
            TargetSpec::LevelSet { constraints } => {
                if constraints.is_empty() {
                    return Ok((0.0, true)); // whole space
                }
                let mut q = Vec::with_capacity(1 + x.len());
                q.push(t);
                q.extend_from_slice(x);
                let start = q.clone();
                let mut converged = false;
                for _ in 0..50 {
                    let residual = self.eval_constraints(q[0], &q[1..])?;
                    let res_norm: f64 = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if res_norm <= 1e-12 * (1.0 + scale_of(&q)) {
                        converged = true;
                        break;
                    }
                    let rows = self.jacobian_rows(q[0], &q[1..])?;
                    let step = gauss_newton_step(&rows, &residual);
                    match step {
                        Some(delta) => {
                            for (qi, di) in q.iter_mut().zip(&delta) {
                                *qi -= di;
                            }
                        }
                        None => break,
                    }
                }
                let dist: f64 = q
                    .iter()
                    .zip(&start)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if converged {
                    Ok((dist, true))
                } else {
                    // First-order estimate |DPhi^+ Phi| from the start point.
                    let residual = self.eval_constraints(start[0], &start[1..])?;
                    let rows = self.jacobian_rows(start[0], &start[1..])?;
                    let est = gauss_newton_step(&rows, &residual)
                        .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .unwrap_or(f64::INFINITY);
                    Ok((est, false))
                }
            }
        }
    }

    pub fn eval_constraints(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        match self {
            TargetSpec::Point { time, state } => {
                let mut out = vec![t - time];
                out.extend(x.iter().zip(state).map(|(a, b)| a - b));
                Ok(out)
            }
            TargetSpec::LevelSet { constraints } => {
                constraints.iter().map(|phi| phi.eval(x, t)).collect()
            }
        }
    }
}

fn scale_of(q: &[f64]) -> f64 {
    q.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Minimum-norm solution of `J d = r` via the normal equations on the row
/// space, `d = J^T (J J^T)^{-1} r`.
fn gauss_newton_step(rows: &[Vec<f64>], residual: &[f64]) -> Option<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    if rows.is_empty() {
        return None;
    }
    let c = rows.len();
    let n = rows[0].len();
    let j = DMatrix::from_fn(c, n, |i, k| rows[i][k]);
    let r = DVector::from_column_slice(residual);
    let jjt = &j * j.transpose();
    let sol = jjt.svd(true, true).solve(&r, 1e-12).ok()?;
    let d = j.transpose() * sol;
    Some(d.as_slice().to_vec())
}
