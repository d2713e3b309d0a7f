//! Empirical probing for a local infimum gap: sample feasible embedded
//! strict-sense processes inside an L1 control ball around a feasible
//! reference extended process and compare the best sampled cost with the
//! reference cost.
//!
//! The probe reports evidence, never a proof: the verdict names are
//! `GapDetected`, `NoGapEvidence` and `Undetermined` accordingly. Sampling
//! stays inside canonical strict-positive processes, which loses no
//! generality for the gap question.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::extremal::Problem;
use crate::metric::{dist_d_controls, MetricError};
use crate::process::{
    canonicalize, check_feasible, euclidean_norm, simulate_extended, ControlSignal,
    ExtendedProcess, FeasibilityReport, ProcessError, StepSize,
};

#[derive(Debug, Error)]
pub enum GapError {
    #[error("reference process is infeasible: {0}")]
    InfeasibleReference(String),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Expr(#[from] crate::expr::ExprError),
    #[error(transparent)]
    Cone(#[from] crate::cone::ConeError),
}

/// Sampler configuration. `min_clock` is the strict-positivity floor of
/// the emitted clock rates; samples cannot represent jumps faster than it.
#[derive(Debug, Clone)]
pub struct SamplerParams {
    pub min_clock: f64,
    pub lift_grid: Vec<f64>,
    pub step: StepSize,
    /// Rejection attempts per requested sample.
    pub max_attempt_factor: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            min_clock: 0.02,
            lift_grid: vec![0.2, 0.1, 0.05, 0.025],
            step: StepSize::default(),
            max_attempt_factor: 8,
        }
    }
}

/// Raise the clock rate to at least `epsilon` on every interval, keep the
/// control part, and canonicalize. Inputs already satisfying the floor are
/// returned unchanged.
pub fn epsilon_lift(
    problem: &Problem,
    z: &ExtendedProcess,
    epsilon: f64,
    step: StepSize,
) -> Result<ExtendedProcess, GapError> {
    if z.control.min_clock_rate() >= epsilon {
        return Ok(z.clone());
    }
    let control = &z.control;
    let mut w0 = Vec::with_capacity(control.intervals());
    let mut w = Vec::with_capacity(control.intervals());
    for i in 0..control.intervals() {
        let (v0, v) = control.value(i);
        w0.push(v0.max(epsilon));
        w.push(v.to_vec());
    }
    let lifted = ControlSignal::new(control.breakpoints().to_vec(), w0, w)?;
    let lifted = simulate_extended(&problem.dynamics, &lifted, &z.initial_state, step)?;
    Ok(canonicalize(&problem.dynamics, &lifted, step)?)
}

/// Push raw per-interval values onto the canonical slice with a clock
/// floor: the control part keeps its direction, the clock takes the rest.
fn to_canonical_slice(w0_raw: f64, w_raw: &[f64], floor: f64) -> (f64, Vec<f64>) {
    let wn = euclidean_norm(w_raw);
    let activity = w0_raw.max(0.0) + wn;
    if activity <= 1e-12 {
        return (1.0, vec![0.0; w_raw.len()]);
    }
    let mut w0 = w0_raw.max(0.0) / activity;
    if w0 < floor {
        w0 = floor;
    }
    let scale = if wn > 0.0 { (1.0 - w0) / wn } else { 0.0 };
    (w0, w_raw.iter().map(|v| v * scale).collect())
}

/// Deterministic-given-seed population of canonical strict-positive
/// processes within `d(. , z_ref) < radius`: the epsilon-lift ladder, plus
/// random piecewise-constant perturbations projected back to the cone and
/// the canonical slice, plus horizon jitter within `radius / 2`. Every
/// emitted sample has its distance re-verified.
pub fn sample_ball(
    problem: &Problem,
    z_ref: &ExtendedProcess,
    radius: f64,
    budget: usize,
    seed: u64,
    params: &SamplerParams,
) -> Result<Vec<ExtendedProcess>, GapError> {
    let mut controls: Vec<ControlSignal> = Vec::new();
    if budget == 0 {
        return Ok(Vec::new());
    }
    for &eps in &params.lift_grid {
        if controls.len() >= budget {
            break;
        }
        let lifted = epsilon_lift(problem, z_ref, eps, params.step)?;
        if lifted.control.is_strict_positive()
            && dist_d_controls(&lifted.control, &z_ref.control)?.total < radius
        {
            controls.push(lifted.control.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = z_ref.control.control_dim();
    let s_ref = z_ref.horizon();
    let mut attempts = 0usize;
    let max_attempts = budget.saturating_mul(params.max_attempt_factor);
    while controls.len() < budget && attempts < max_attempts {
        attempts += 1;
        // Perturbation amplitude keeps the expected distance below the
        // radius; the exact check below is authoritative.
        let amp = rng.random_range(0.0..1.0) * radius / (2.0 * (1.0 + s_ref));
        let jitter = rng.random_range(-1.0..1.0) * radius / 4.0;

        // Refine the breakpoint grid with a few random cuts.
        let mut cuts: Vec<f64> = z_ref.control.breakpoints().to_vec();
        for _ in 0..rng.random_range(0..3) {
            cuts.push(rng.random_range(0.0..s_ref));
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + s_ref));

        let mut w0 = Vec::with_capacity(cuts.len() - 1);
        let mut w = Vec::with_capacity(cuts.len() - 1);
        for pair in cuts.windows(2) {
            let mid = 0.5 * (pair[0] + pair[1]);
            let (r0, rw) = z_ref.control.value(z_ref.control.index_at(mid));
            let raw0 = r0 + amp * normal(&mut rng);
            let raww: Vec<f64> = rw.iter().map(|v| v + amp * normal(&mut rng)).collect();
            let projected = problem.cone.project(&raww)?;
            let (c0, cw) = to_canonical_slice(raw0, &projected, params.min_clock);
            w0.push(c0);
            w.push(cw);
        }

        // Horizon jitter: extend by holding the last value, or truncate.
        let mut breakpoints = cuts;
        if jitter > 1e-9 * (1.0 + s_ref) {
            breakpoints.push(s_ref + jitter);
            w0.push(*w0.last().unwrap());
            w.push(w.last().unwrap().clone());
        } else if jitter < -1e-9 * (1.0 + s_ref) {
            let s_cut = (s_ref + jitter).max(s_ref * 0.1);
            while breakpoints.len() >= 2 && breakpoints[breakpoints.len() - 2] >= s_cut {
                breakpoints.pop();
                w0.pop();
                w.pop();
            }
            *breakpoints.last_mut().unwrap() = s_cut;
        }
        let _ = m;

        let Ok(candidate) = ControlSignal::new(breakpoints, w0, w) else {
            continue;
        };
        if !candidate.is_strict_positive() || !candidate.is_canonical() {
            continue;
        }
        if dist_d_controls(&candidate, &z_ref.control)?.total < radius {
            controls.push(candidate);
        }
    }

    // Simulation is the expensive part; it parallelizes over samples while
    // index order keeps the output deterministic.
    let sims: Result<Vec<ExtendedProcess>, ProcessError> = controls
        .par_iter()
        .map(|c| simulate_extended(&problem.dynamics, c, &z_ref.initial_state, params.step))
        .collect();
    Ok(sims?)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GapVerdict {
    GapDetected,
    NoGapEvidence,
    Undetermined,
}

/// One `(radius, eta)` record of the probe.
#[derive(Debug, Clone, Serialize)]
pub struct GapRecord {
    pub radius: f64,
    pub eta: f64,
    pub samples: usize,
    pub feasible_count: usize,
    /// Best (lowest) cost among feasible samples, cumulative over radii.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_cost: Option<f64>,
    /// Smallest endpoint distance to the target over all samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_target_distance: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub reference_cost: f64,
    pub reference_feasibility: FeasibilityReport,
    pub gap_margin: f64,
    pub records: Vec<GapRecord>,
    pub verdict: GapVerdict,
}

#[derive(Debug, Clone)]
pub struct GapParams {
    pub radii: Vec<f64>,
    pub etas: Vec<f64>,
    pub budget: usize,
    pub seed: u64,
    /// Cost margin for the verdict; default `1e-3 (1 + |reference cost|)`.
    pub margin: Option<f64>,
    pub sampler: SamplerParams,
}

impl Default for GapParams {
    fn default() -> Self {
        GapParams {
            radii: vec![0.1, 0.3, 1.0],
            etas: vec![1e-2, 3e-3, 1e-3],
            budget: 2000,
            seed: 0,
            margin: None,
            sampler: SamplerParams::default(),
        }
    }
}

/// Probe for a local infimum gap at the reference process. For every
/// radius: draw samples, keep those feasible at each tolerance `eta`, and
/// track the best cost. The verdict is taken at the loosest `eta`:
///
/// * `GapDetected` when no radius produced a feasible sample, or the best
///   cost at the smallest radius exceeds the reference cost by more than
///   the margin;
/// * `NoGapEvidence` when the smallest radius has a feasible sample within
///   the margin of the reference cost;
/// * `Undetermined` otherwise.
pub fn probe_gap(
    problem: &Problem,
    z_ref: &ExtendedProcess,
    params: &GapParams,
) -> Result<GapReport, GapError> {
    let mut etas = params.etas.clone();
    etas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let eta_min = etas.last().copied().unwrap_or(1e-3);
    let eta_max = etas.first().copied().unwrap_or(1e-2);
    let mut radii = params.radii.clone();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let reference_feasibility =
        check_feasible(z_ref, &problem.target, problem.energy_bound, eta_min)?;
    if !reference_feasibility.feasible {
        return Err(GapError::InfeasibleReference(format!(
            "target distance {:.3e}, energy {:.3e}",
            reference_feasibility.target_distance, reference_feasibility.endpoint_energy
        )));
    }
    let (y0_end, y_end, _) = z_ref.endpoint();
    let reference_cost = problem.cost_value(y0_end, y_end)?;
    let gap_margin = params
        .margin
        .unwrap_or(1e-3 * (1.0 + reference_cost.abs()));

    let mut records = Vec::new();
    // Cumulative best over increasing radii, per eta: any sample in a
    // smaller ball also lies in every larger one.
    let mut best_cost_per_eta: Vec<Option<f64>> = vec![None; etas.len()];
    let mut count_smallest_radius: Vec<usize> = vec![0; etas.len()];
    let mut best_at_smallest: Vec<Option<f64>> = vec![None; etas.len()];
    let mut any_feasible: Vec<bool> = vec![false; etas.len()];

    for (ri, &radius) in radii.iter().enumerate() {
        let seed_r = params
            .seed
            .wrapping_add((ri as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let samples = sample_ball(problem, z_ref, radius, params.budget, seed_r, &params.sampler)?;
        // Evaluate each sample once.
        let evals: Vec<(f64, f64, f64)> = samples
            .iter()
            .map(|z| -> Result<(f64, f64, f64), GapError> {
                let (t_end, x_end, b_end) = z.endpoint();
                let (dist, _) = problem.target.distance(t_end, x_end)?;
                let cost = problem.cost_value(t_end, x_end)?;
                Ok((dist, b_end, cost))
            })
            .collect::<Result<_, _>>()?;
        let best_distance = evals
            .iter()
            .map(|e| e.0)
            .fold(f64::INFINITY, f64::min);

        for (ei, &eta) in etas.iter().enumerate() {
            let feasible: Vec<&(f64, f64, f64)> = evals
                .iter()
                .filter(|(dist, b_end, _)| {
                    *dist <= eta && *b_end <= problem.energy_bound + eta
                })
                .collect();
            let local_best = feasible
                .iter()
                .map(|e| e.2)
                .fold(f64::INFINITY, f64::min);
            if !feasible.is_empty() {
                any_feasible[ei] = true;
                best_cost_per_eta[ei] = Some(match best_cost_per_eta[ei] {
                    Some(prev) => prev.min(local_best),
                    None => local_best,
                });
            }
            if ri == 0 {
                count_smallest_radius[ei] = feasible.len();
                best_at_smallest[ei] = if feasible.is_empty() {
                    None
                } else {
                    Some(local_best)
                };
            }
            records.push(GapRecord {
                radius,
                eta,
                samples: samples.len(),
                feasible_count: feasible.len(),
                best_cost: best_cost_per_eta[ei],
                best_target_distance: if samples.is_empty() {
                    None
                } else {
                    Some(best_distance)
                },
            });
        }
    }

    // Verdict at the loosest eta.
    let loose = etas
        .iter()
        .position(|&e| e == eta_max)
        .unwrap_or(0);
    let verdict = if !any_feasible[loose] {
        GapVerdict::GapDetected
    } else if count_smallest_radius[loose] > 0 {
        let best = best_at_smallest[loose].unwrap();
        if best > reference_cost + gap_margin {
            GapVerdict::GapDetected
        } else {
            GapVerdict::NoGapEvidence
        }
    } else {
        // Feasible somewhere, but not yet at the smallest radius.
        match best_cost_per_eta[loose] {
            Some(best) if best > reference_cost + gap_margin => GapVerdict::GapDetected,
            _ => GapVerdict::Undetermined,
        }
    };

    Ok(GapReport {
        reference_cost,
        reference_feasibility,
        gap_margin,
        records,
        verdict,
    })
}

/// CSV of `(r, eta, best_cost, feasible_count)` rows for plotting.
pub fn gap_records_csv(report: &GapReport) -> String {
    let mut out = String::from("r,eta,best_cost,feasible_count\n");
    for rec in &report.records {
        let best = rec
            .best_cost
            .map_or(String::from(""), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.radius, rec.eta, best, rec.feasible_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::Cone;
    use crate::expr::parse;
    use crate::target::TargetSpec;

    fn pure_jump() -> (Problem, ExtendedProcess) {
        let dynamics = crate::process::tests::scalar_dynamics("0", "1");
        let cone = Cone::new(0, 1, vec![vec![1.0]]).unwrap();
        let target = TargetSpec::point(0.0, vec![1.0]);
        let cost = parse("t", 1).unwrap();
        let problem = Problem::new(dynamics, cone, target, cost, f64::INFINITY).unwrap();
        let sig = ControlSignal::constant(1.0, 0.0, vec![1.0]).unwrap();
        let z = simulate_extended(&problem.dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        (problem, z)
    }

    fn reach_point() -> (Problem, ExtendedProcess) {
        let dynamics = crate::process::tests::scalar_dynamics("0", "1");
        let cone = Cone::full(1);
        let target = TargetSpec::point(1.0, vec![1.0]);
        let cost = parse("t", 1).unwrap();
        let problem = Problem::new(dynamics, cone, target, cost, f64::INFINITY).unwrap();
        let sig = ControlSignal::constant(2.0, 0.5, vec![0.5]).unwrap();
        let z = simulate_extended(&problem.dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        (problem, z)
    }

    #[test]
    fn lift_of_pure_jump_matches_hand_values() {
        let (problem, z) = pure_jump();
        let lifted = epsilon_lift(&problem, &z, 0.1, StepSize::default()).unwrap();
        assert!((lifted.horizon() - 1.1).abs() <= 1e-12);
        let (w0, w) = lifted.control.value(0);
        assert!((w0 - 1.0 / 11.0).abs() <= 1e-12);
        assert!((w[0] - 10.0 / 11.0).abs() <= 1e-12);
        assert!(lifted.control.is_canonical());
        assert!(lifted.control.is_strict_positive());
    }

    #[test]
    fn lift_is_identity_above_the_floor() {
        let (problem, z) = reach_point();
        let lifted = epsilon_lift(&problem, &z, 0.2, StepSize::default()).unwrap();
        assert_eq!(lifted.control, z.control);
    }

    #[test]
    fn lift_distance_decreases_with_epsilon() {
        let (problem, z) = pure_jump();
        let mut last = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05, 0.025] {
            let lifted = epsilon_lift(&problem, &z, eps, StepSize::default()).unwrap();
            let d = dist_d_controls(&lifted.control, &z.control).unwrap().total;
            assert!(d < last, "distance must decrease along the lift ladder");
            last = d;
        }
    }

    #[test]
    fn sample_ball_respects_budget_radius_and_seed() {
        let (problem, z) = reach_point();
        let params = SamplerParams::default();
        assert!(sample_ball(&problem, &z, 0.5, 0, 7, &params)
            .unwrap()
            .is_empty());
        let a = sample_ball(&problem, &z, 0.5, 40, 7, &params).unwrap();
        let b = sample_ball(&problem, &z, 0.5, 40, 7, &params).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (za, zb) in a.iter().zip(&b) {
            assert_eq!(za.control, zb.control, "same seed must give identical samples");
        }
        for za in &a {
            let d = dist_d_controls(&za.control, &z.control).unwrap().total;
            assert!(d < 0.5, "sample at distance {d} >= radius");
            assert!(za.control.is_strict_positive());
            assert!(za.control.is_canonical());
        }
    }

    #[test]
    fn probe_detects_gap_on_pure_jump() {
        let (problem, z) = pure_jump();
        let params = GapParams {
            budget: 150,
            ..GapParams::default()
        };
        let report = probe_gap(&problem, &z, &params).unwrap();
        assert_eq!(report.verdict, GapVerdict::GapDetected);
        for rec in &report.records {
            assert_eq!(rec.feasible_count, 0, "no strict sample may be feasible");
        }
    }

    #[test]
    fn probe_finds_no_gap_on_reach_point() {
        let (problem, z) = reach_point();
        let params = GapParams {
            budget: 150,
            ..GapParams::default()
        };
        let report = probe_gap(&problem, &z, &params).unwrap();
        assert_eq!(report.verdict, GapVerdict::NoGapEvidence);
        // The reference is strict-positive, so it appears in its own ball;
        // at the tightest feasibility tolerance the best cost matches the
        // reference cost.
        let eta_min = params.etas.iter().copied().fold(f64::INFINITY, f64::min);
        let best = report
            .records
            .iter()
            .filter(|r| r.eta == eta_min)
            .filter_map(|r| r.best_cost)
            .fold(f64::INFINITY, f64::min);
        assert!((best - report.reference_cost).abs() <= 5e-3);
    }

    #[test]
    fn probe_rejects_infeasible_reference() {
        let (problem, _) = reach_point();
        let sig = ControlSignal::constant(1.0, 1.0, vec![0.0]).unwrap();
        let z = simulate_extended(&problem.dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        assert!(matches!(
            probe_gap(&problem, &z, &GapParams::default()),
            Err(GapError::InfeasibleReference(_))
        ));
    }

    #[test]
    fn feasible_counts_are_monotone_in_eta() {
        let (problem, z) = reach_point();
        let params = GapParams {
            budget: 80,
            ..GapParams::default()
        };
        let report = probe_gap(&problem, &z, &params).unwrap();
        // Group records by radius; counts must be nonincreasing as eta
        // shrinks (records are emitted loosest-eta first).
        for radius in [0.1, 0.3, 1.0] {
            let counts: Vec<usize> = report
                .records
                .iter()
                .filter(|r| r.radius == radius)
                .map(|r| r.feasible_count)
                .collect();
            for pair in counts.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }
    }

    #[test]
    fn impulse_perturbed_reference_still_shows_no_gap() {
        // Controllable dynamics; the reference carries an impulse segment
        // of mass 0.1 after the embedded unit control.
        let dynamics = crate::process::tests::scalar_dynamics("0", "1");
        let cone = Cone::full(1);
        let target = TargetSpec::point(1.0, vec![1.1]);
        let cost = parse("t", 1).unwrap();
        let problem = Problem::new(dynamics, cone, target, cost, f64::INFINITY).unwrap();
        let sig = ControlSignal::new(
            vec![0.0, 2.0, 2.1],
            vec![0.5, 0.0],
            vec![vec![0.5], vec![1.0]],
        )
        .unwrap();
        let z = simulate_extended(&problem.dynamics, &sig, &[0.0], StepSize::default()).unwrap();
        let params = GapParams {
            radii: vec![0.5],
            budget: 200,
            margin: Some(5e-3),
            ..GapParams::default()
        };
        let report = probe_gap(&problem, &z, &params).unwrap();
        assert_eq!(report.verdict, GapVerdict::NoGapEvidence);
        let best = report
            .records
            .iter()
            .filter_map(|r| r.best_cost)
            .fold(f64::INFINITY, f64::min);
        assert!(
            (best - report.reference_cost).abs() <= 5e-3,
            "best sampled cost {best} vs reference {}",
            report.reference_cost
        );
    }

    #[test]
    fn reports_are_reproducible() {
        let (problem, z) = reach_point();
        let params = GapParams {
            budget: 60,
            ..GapParams::default()
        };
        let a = probe_gap(&problem, &z, &params).unwrap();
        let b = probe_gap(&problem, &z, &params).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
