//! Command-line front end: scenario ingestion, command dispatch, and JSON
//! report emission.
//!
//! Exit codes: 0 on success, 2 on validation failures (malformed scenario
//! files, expressions, cones, multiplier signs, missing inputs), 3 on
//! numerical failures (overflow, domain errors, degenerate clocks,
//! infeasible references).

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use impulse_gap::error::ErrorClass;
use impulse_gap::extremal::{
    adjoint_csv, check_conditions, classify_normality, ConditionParams, ConditionReport,
    MultiplierCertificate, SearchParams,
};
use impulse_gap::fields::{enumerate_family, BracketFamily, FamilyTag};
use impulse_gap::gap::{gap_records_csv, probe_gap, GapParams, GapReport, SamplerParams};
use impulse_gap::metric::{dist_d_controls, dist_dtilde_controls, DistanceReport};
use impulse_gap::process::{
    canonicalize, check_feasible, embed, extended_trajectory_csv, simulate_extended,
    simulate_strict, strict_trajectory_csv, ControlRecord, ControlSignal, ExtendedProcess,
    StepSize,
};
use impulse_gap::scenario::{parse_scenario_str, CertificateFile, Scenario};
use impulse_gap::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "impulse-gap",
    version,
    about = "Simulate impulsive extensions of control-affine problems, check higher-order \
             extremality certificates, and probe for local infimum gaps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output report path (JSON).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory for trajectory CSV exports.
    #[arg(long, global = true)]
    traj_dir: Option<PathBuf>,
    /// Seed for all randomized components.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Absolute integration step (default: 1e-3 of each horizon).
    #[arg(long, global = true)]
    h: Option<f64>,
    /// Maximum degree of the iterated bracket families.
    #[arg(long, global = true, default_value_t = 3)]
    max_degree: usize,
    /// Ball radii for the gap probe (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Feasibility tolerance schedule for the gap probe (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Sample budget per radius for the gap probe.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Worker threads for sample simulation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Integrate the scenario's reference extended control.
    Simulate,
    /// Embed the scenario's strict control as a canonical extended process.
    Embed,
    /// Canonicalize the reference extended process.
    Canonicalize,
    /// Control distances d and d-tilde between `reference_control` and
    /// `distance_to`.
    Distance,
    /// Enumerate the iterated bracket families.
    Brackets,
    /// Check the scenario's candidate certificate against all conditions.
    CheckExtremal,
    /// Classify the reference process as normal or abnormal.
    Classify,
    /// Probe for a local infimum gap around the reference process.
    ProbeGap,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Embed => "embed",
            Command::Canonicalize => "canonicalize",
            Command::Distance => "distance",
            Command::Brackets => "brackets",
            Command::CheckExtremal => "check-extremal",
            Command::Classify => "classify",
            Command::ProbeGap => "probe-gap",
        }
    }
}

enum CliError {
    Usage(String),
    Io(std::io::Error),
    Core(CoreError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }
}

impl<E: Into<CoreError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Core(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    scenario: String,
    scenario_sha256: String,
    seed: u64,
    timestamp_unix: u64,
}

#[derive(Serialize)]
struct RunReport {
    header: Header,
    result: serde_json::Value,
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("IMPULSE_GAP_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

struct Ctx {
    scenario: Scenario,
    step: StepSize,
    families: (BracketFamily, BracketFamily),
    traj_dir: Option<PathBuf>,
}

impl Ctx {
    fn reference(&self) -> Result<&ControlSignal, CliError> {
        self.scenario
            .reference_control
            .as_ref()
            .ok_or_else(|| usage("this command needs a `reference_control` in the scenario file"))
    }

    fn reference_process(&self) -> Result<ExtendedProcess, CliError> {
        let control = self.reference()?;
        Ok(simulate_extended(
            &self.scenario.problem.dynamics,
            control,
            &self.scenario.x0,
            self.step,
        )?)
    }

    fn write_traj(&self, name: &str, content: &str) -> Result<(), CliError> {
        if let Some(dir) = &self.traj_dir {
            std::fs::create_dir_all(dir).map_err(CliError::Io)?;
            std::fs::write(dir.join(name), content).map_err(CliError::Io)?;
        }
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let scenario_path = cli
        .scenario
        .as_ref()
        .ok_or_else(|| usage("--scenario is required"))?;
    let out_path = cli.out.as_ref().ok_or_else(|| usage("--out is required"))?;
    if cli.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global();

    let raw = std::fs::read(scenario_path).map_err(CliError::Io)?;
    let text = String::from_utf8_lossy(&raw);
    let mut scenario = parse_scenario_str(&text)?;
    if let Some(h) = cli.h {
        if h <= 0.0 {
            return Err(usage("--h must be positive"));
        }
        scenario.step = StepSize::Absolute(h);
    }
    let step = scenario.step;
    let m1 = scenario.problem.cone.m1();
    let families = (
        enumerate_family(m1, cli.max_degree, FamilyTag::B0),
        enumerate_family(m1, cli.max_degree, FamilyTag::B1),
    );
    let ctx = Ctx {
        scenario,
        step,
        families,
        traj_dir: cli.traj_dir.clone(),
    };

    let (result, summary) = dispatch(cli, &ctx)?;

    let report = RunReport {
        header: Header {
            tool: "impulse-gap",
            version: env!("CARGO_PKG_VERSION"),
            command: cli.command.name(),
            scenario: scenario_path.display().to_string(),
            scenario_sha256: hex::encode(Sha256::digest(&raw)),
            seed: cli.seed,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
        result,
    };
    write_json(out_path, &report)?;
    Ok(format!("{}: {summary} -> {}", cli.command.name(), out_path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(CliError::Io)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serialization");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::Io)
}

fn dispatch(cli: &Cli, ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    match cli.command {
        Command::Simulate => cmd_simulate(cli, ctx),
        Command::Embed => cmd_embed(ctx),
        Command::Canonicalize => cmd_canonicalize(ctx),
        Command::Distance => cmd_distance(ctx),
        Command::Brackets => cmd_brackets(cli, ctx),
        Command::CheckExtremal => cmd_check_extremal(ctx),
        Command::Classify => cmd_classify(cli, ctx),
        Command::ProbeGap => cmd_probe_gap(cli, ctx),
    }
}

#[derive(Serialize)]
struct SimulateResult {
    horizon: f64,
    endpoint_time: f64,
    endpoint_state: Vec<f64>,
    endpoint_energy: f64,
    cost: f64,
    canonical: bool,
    strict_positive: bool,
    feasibility: impulse_gap::process::FeasibilityReport,
}

fn cmd_simulate(cli: &Cli, ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let z = ctx.reference_process()?;
    let eta = cli
        .eta
        .as_ref()
        .and_then(|v| v.iter().copied().reduce(f64::min))
        .unwrap_or(1e-3);
    let feasibility = check_feasible(
        &z,
        &ctx.scenario.problem.target,
        ctx.scenario.problem.energy_bound,
        eta,
    )?;
    let (t_end, x_end, b_end) = z.endpoint();
    let cost = ctx.scenario.problem.cost_value(t_end, x_end)?;
    ctx.write_traj("extended.csv", &extended_trajectory_csv(&z))?;
    let result = SimulateResult {
        horizon: z.horizon(),
        endpoint_time: t_end,
        endpoint_state: x_end.to_vec(),
        endpoint_energy: b_end,
        cost,
        canonical: z.control.is_canonical(),
        strict_positive: z.control.is_strict_positive(),
        feasibility,
    };
    let summary = format!(
        "endpoint (t, x) = ({t_end:.6}, {x_end:?}), cost {cost:.6}, feasible: {}",
        result.feasibility.feasible
    );
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct EmbedResult {
    strict_horizon: f64,
    extended_horizon: f64,
    canonical: bool,
    strict_positive: bool,
    /// Endpoint identity defects |y0(S) - T|, |y(S) - x(T)|, |beta(S) - v(T)|.
    time_defect: f64,
    state_defect: f64,
    energy_defect: f64,
    embedded_control: Vec<ControlRecord>,
}

fn cmd_embed(ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let strict = ctx
        .scenario
        .strict_control
        .as_ref()
        .ok_or_else(|| usage("embed needs a `strict_control` in the scenario file"))?;
    let dynamics = &ctx.scenario.problem.dynamics;
    let p = simulate_strict(dynamics, strict, &ctx.scenario.x0, ctx.step)?;
    let z = embed(dynamics, &p, ctx.step)?;
    let (x_end, v_end) = p.endpoint();
    let (y0_end, y_end, b_end) = z.endpoint();
    let state_defect = x_end
        .iter()
        .zip(y_end)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    ctx.write_traj("strict.csv", &strict_trajectory_csv(&p))?;
    ctx.write_traj("embedded.csv", &extended_trajectory_csv(&z))?;
    let result = EmbedResult {
        strict_horizon: p.horizon(),
        extended_horizon: z.horizon(),
        canonical: z.control.is_canonical(),
        strict_positive: z.control.is_strict_positive(),
        time_defect: (y0_end - p.horizon()).abs(),
        state_defect,
        energy_defect: (b_end - v_end).abs(),
        embedded_control: z.control.clone().into(),
    };
    let summary = format!(
        "T = {:.6} -> S = {:.6}, endpoint defects ({:.2e}, {:.2e}, {:.2e})",
        result.strict_horizon,
        result.extended_horizon,
        result.time_defect,
        result.state_defect,
        result.energy_defect
    );
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct CanonicalizeResult {
    original_horizon: f64,
    canonical_horizon: f64,
    slice_residual: f64,
    endpoint_drift: f64,
    canonical_control: Vec<ControlRecord>,
}

fn cmd_canonicalize(ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let dynamics = &ctx.scenario.problem.dynamics;
    let z = ctx.reference_process()?;
    let c = canonicalize(dynamics, &z, ctx.step)?;
    let (a0, a, ab) = z.endpoint();
    let (b0, b, bb) = c.endpoint();
    let mut drift = (a0 - b0).abs().max((ab - bb).abs());
    for (p, q) in a.iter().zip(b) {
        drift = drift.max((p - q).abs());
    }
    ctx.write_traj("canonical.csv", &extended_trajectory_csv(&c))?;
    let result = CanonicalizeResult {
        original_horizon: z.horizon(),
        canonical_horizon: c.horizon(),
        slice_residual: c.control.slice_residual(),
        endpoint_drift: drift,
        canonical_control: c.control.clone().into(),
    };
    let summary = format!(
        "S = {:.6} -> S_c = {:.6}, slice residual {:.2e}",
        result.original_horizon, result.canonical_horizon, result.slice_residual
    );
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct DistanceResult {
    d: DistanceReport,
    dtilde: DistanceReport,
}

fn cmd_distance(ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let a = ctx.reference()?;
    let b = ctx
        .scenario
        .distance_to
        .as_ref()
        .ok_or_else(|| usage("distance needs a `distance_to` control in the scenario file"))?;
    let result = DistanceResult {
        d: dist_d_controls(a, b)?,
        dtilde: dist_dtilde_controls(a, b)?,
    };
    let summary = format!("d = {:.9}, dtilde = {:.9}", result.d.total, result.dtilde.total);
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct BracketsResult {
    m1: usize,
    max_degree: usize,
    b0: Vec<String>,
    b1: Vec<String>,
}

fn cmd_brackets(cli: &Cli, ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let _ = cli;
    let (b0, b1) = &ctx.families;
    let result = BracketsResult {
        m1: b0.m1,
        max_degree: b0.max_degree,
        b0: b0.entries.iter().map(|b| b.to_string()).collect(),
        b1: b1.entries.iter().map(|b| b.to_string()).collect(),
    };
    let summary = format!("{} bracket entries up to degree {}", result.b0.len(), result.max_degree);
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct CheckExtremalResult {
    certificate: CertificateFile,
    report: ConditionReport,
}

fn cmd_check_extremal(ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let cf = ctx
        .scenario
        .certificate
        .clone()
        .ok_or_else(|| usage("check-extremal needs a `certificate` in the scenario file"))?;
    let z = ctx.reference_process()?;
    let cert = MultiplierCertificate::new(
        &ctx.scenario.problem.dynamics,
        &z,
        cf.p0,
        cf.p_terminal.clone(),
        cf.pi,
        cf.lambda,
    )?;
    let report = check_conditions(
        &ctx.scenario.problem,
        &z,
        &ctx.families.0,
        &ctx.families.1,
        &cert,
        &ConditionParams::default(),
    )?;
    ctx.write_traj("adjoint.csv", &adjoint_csv(&cert.adjoint))?;
    let summary = format!(
        "{} ({} of {} conditions pass)",
        if report.all_pass { "extremal" } else { "not extremal" },
        report.entries.iter().filter(|e| e.pass).count(),
        report.entries.len()
    );
    let result = CheckExtremalResult {
        certificate: cf,
        report,
    };
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

#[derive(Serialize)]
struct ClassifyResult {
    verdict: impulse_gap::extremal::Normality,
    min_residual: f64,
    tol: f64,
    certificate: Option<CertificateFile>,
    condition_report: Option<ConditionReport>,
    outcomes: Vec<impulse_gap::extremal::NormalizationOutcome>,
}

fn cmd_classify(cli: &Cli, ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let z = ctx.reference_process()?;
    let params = SearchParams {
        seed: cli.seed,
        ..SearchParams::default()
    };
    let rep = classify_normality(
        &ctx.scenario.problem,
        &z,
        &ctx.families.0,
        &ctx.families.1,
        &params,
    )?;
    if let Some(cert) = &rep.certificate {
        ctx.write_traj("adjoint.csv", &adjoint_csv(&cert.adjoint))?;
    }
    let result = ClassifyResult {
        verdict: rep.verdict,
        min_residual: rep.min_residual,
        tol: rep.tol,
        certificate: rep.certificate.as_ref().map(|c| CertificateFile {
            p0: c.p0,
            p_terminal: c.p_terminal.clone(),
            pi: c.pi,
            lambda: c.lambda,
        }),
        condition_report: rep.condition_report,
        outcomes: rep.outcomes,
    };
    let summary = format!("{:?}", result.verdict);
    Ok((serde_json::to_value(&result).unwrap(), summary))
}

fn cmd_probe_gap(cli: &Cli, ctx: &Ctx) -> Result<(serde_json::Value, String), CliError> {
    let z = ctx.reference_process()?;
    let defaults = GapParams::default();
    let params = GapParams {
        radii: cli.radii.clone().unwrap_or(defaults.radii),
        etas: cli.eta.clone().unwrap_or(defaults.etas),
        budget: cli.budget.unwrap_or(defaults.budget),
        seed: cli.seed,
        margin: ctx.scenario.gap_margin,
        sampler: SamplerParams {
            step: ctx.step,
            ..SamplerParams::default()
        },
    };
    let report: GapReport = probe_gap(&ctx.scenario.problem, &z, &params)?;
    ctx.write_traj("gap_records.csv", &gap_records_csv(&report))?;
    let summary = format!(
        "{:?} (reference cost {:.6})",
        report.verdict, report.reference_cost
    );
    Ok((serde_json::to_value(&report).unwrap(), summary))
}
