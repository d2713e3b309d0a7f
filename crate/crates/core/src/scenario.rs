//! Scenario ingestion: a JSON file describing the problem data (dynamics,
//! cone, target, cost, energy bound) plus optional reference controls and
//! a candidate multiplier certificate.
//!
//! Validation enforces the three structural hypotheses the analysis
//! relies on:
//!
//! * (i) the vector fields are smooth; their sampled sup-norms over the
//!   declared state box are compared against an optional declared bound
//!   (violations are logged, not fatal);
//! * (ii) the final cost is a smooth expression of `(t, x)`;
//! * (iii) the control cone splits as `C1 x C2` with `m1 + m2 = m`, where
//!   `C1` carries the signed coordinate axes and `C2` contains no lines.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::cone::Cone;
use crate::expr::{parse, Expression, VectorField};
use crate::extremal::Problem;
use crate::metric::StateBox;
use crate::process::{ControlRecord, ControlSignal, Dynamics, StepSize, StrictControl, StrictRecord};
use crate::target::TargetSpec;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("validation error ({hypothesis}): {message}")]
    Validation { hypothesis: String, message: String },
}

fn invalid(hypothesis: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        hypothesis: hypothesis.to_string(),
        message: message.into(),
    }
}

/// Energy bound: a positive number or the string `"inf"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EnergyBoundFile {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetFile {
    Point { t: f64, x: Vec<f64> },
    LevelSet { constraints: Vec<String> },
}

#[derive(Debug, Clone, Deserialize, serde::Serialize)]
pub struct CertificateFile {
    pub p0: f64,
    pub p_terminal: Vec<f64>,
    pub pi: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub m: usize,
    pub m1: usize,
    pub m2: usize,
    pub f: Vec<String>,
    pub g: Vec<Vec<String>>,
    #[serde(default)]
    pub c2_generators: Vec<Vec<f64>>,
    pub target: TargetFile,
    pub cost: String,
    pub energy_bound: EnergyBoundFile,
    pub x0: Vec<f64>,
    pub state_box: StateBox,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub field_bound: Option<f64>,
    #[serde(default)]
    pub reference_control: Option<Vec<ControlRecord>>,
    #[serde(default)]
    pub strict_control: Option<Vec<StrictRecord>>,
    #[serde(default)]
    pub certificate: Option<CertificateFile>,
    #[serde(default)]
    pub distance_to: Option<Vec<ControlRecord>>,
    #[serde(default)]
    pub gap_margin: Option<f64>,
}

/// A validated scenario, with the expression fields parsed and the problem
/// data assembled.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub problem: Problem,
    pub x0: Vec<f64>,
    pub state_box: StateBox,
    pub step: StepSize,
    pub reference_control: Option<ControlSignal>,
    pub strict_control: Option<StrictControl>,
    pub certificate: Option<CertificateFile>,
    pub distance_to: Option<ControlSignal>,
    pub gap_margin: Option<f64>,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile =
        serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
            pointer: json_pointer(&e.path().to_string()),
            message: e.inner().to_string(),
        })?;
    build_scenario(file)
}

fn json_pointer(dotted: &str) -> String {
    if dotted == "." {
        return "/".to_string();
    }
    let mut out = String::new();
    for seg in dotted.split('.') {
        // serde_path_to_error writes list indices as `field[3]`.
        let mut rest = seg;
        loop {
            match rest.find('[') {
                Some(i) => {
                    if i > 0 {
                        out.push('/');
                        out.push_str(&rest[..i]);
                    }
                    let close = rest.find(']').unwrap_or(rest.len());
                    out.push('/');
                    out.push_str(&rest[i + 1..close]);
                    rest = rest.get(close + 1..).unwrap_or("");
                }
                None => {
                    if !rest.is_empty() {
                        out.push('/');
                        out.push_str(rest);
                    }
                    break;
                }
            }
            if rest.is_empty() {
                break;
            }
        }
    }
    if out.is_empty() {
        "/".to_string()
    } else {
        out
    }
}

fn parse_field(
    texts: &[String],
    n: usize,
    what: &str,
) -> Result<VectorField, ScenarioError> {
    if texts.len() != n {
        return Err(invalid(
            "hypothesis (i)",
            format!("{what} must have {n} components, found {}", texts.len()),
        ));
    }
    let components: Vec<Expression> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            parse(t, n).map_err(|e| invalid("hypothesis (i)", format!("{what}[{i}]: {e}")))
        })
        .collect::<Result<_, _>>()?;
    VectorField::new(n, components)
        .map_err(|e| invalid("hypothesis (i)", format!("{what}: {e}")))
}

fn build_scenario(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let n = file.n;
    let m = file.m;
    if n == 0 {
        return Err(invalid("hypothesis (i)", "state dimension n must be >= 1"));
    }
    if file.m1 + file.m2 != m {
        return Err(invalid(
            "hypothesis (iii)",
            format!("m1 + m2 must equal m: {} + {} != {m}", file.m1, file.m2),
        ));
    }

    let drift = parse_field(&file.f, n, "f")?;
    if file.g.len() != m {
        return Err(invalid(
            "hypothesis (i)",
            format!("need {m} control fields, found {}", file.g.len()),
        ));
    }
    let control_fields: Vec<VectorField> = file
        .g
        .iter()
        .enumerate()
        .map(|(i, comps)| parse_field(comps, n, &format!("g{}", i + 1)))
        .collect::<Result<_, _>>()?;
    let dynamics = Dynamics::new(drift, control_fields)
        .map_err(|e| invalid("hypothesis (i)", e.to_string()))?;

    let cone = Cone::new(file.m1, file.m2, file.c2_generators.clone())
        .map_err(|e| invalid("hypothesis (iii)", e.to_string()))?;
    if file.m2 > 0 && cone.generator_count() == 0 {
        log::warn!("C2 has no nonzero generators; the cone degenerates to C1 x {{0}}");
    }
    if !cone
        .c2_is_pointed(1e-9)
        .map_err(|e| invalid("hypothesis (iii)", e.to_string()))?
    {
        return Err(invalid(
            "hypothesis (iii)",
            "C2 contains no lines is violated: some generator's negation lies in the cone",
        ));
    }

    let target = match &file.target {
        TargetFile::Point { t, x } => {
            if x.len() != n {
                return Err(invalid(
                    "target",
                    format!("point target state must have dimension {n}"),
                ));
            }
            TargetSpec::point(*t, x.clone())
        }
        TargetFile::LevelSet { constraints } => {
            let exprs: Vec<Expression> = constraints
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    parse(c, n).map_err(|e| invalid("target", format!("constraints[{i}]: {e}")))
                })
                .collect::<Result<_, _>>()?;
            TargetSpec::level_set(exprs)
        }
    };

    let cost = parse(&file.cost, n)
        .map_err(|e| invalid("hypothesis (ii)", format!("cost: {e}")))?;

    let energy_bound = match &file.energy_bound {
        EnergyBoundFile::Number(v) => {
            if *v <= 0.0 {
                return Err(invalid("energy bound", "must be positive"));
            }
            *v
        }
        EnergyBoundFile::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => f64::INFINITY,
            other => {
                return Err(invalid(
                    "energy bound",
                    format!("expected a number or \"inf\", got \"{other}\""),
                ))
            }
        },
    };

    if file.x0.len() != n {
        return Err(invalid(
            "initial state",
            format!("x0 must have dimension {n}"),
        ));
    }
    if file.state_box.lo.len() != n || file.state_box.hi.len() != n {
        return Err(invalid(
            "state box",
            format!("box bounds must have dimension {n}"),
        ));
    }
    if file
        .state_box
        .lo
        .iter()
        .zip(&file.state_box.hi)
        .any(|(lo, hi)| lo >= hi)
    {
        return Err(invalid("state box", "each lo must be below hi"));
    }
    if !file.state_box.contains(&file.x0, 0.0) {
        return Err(invalid("state box", "x0 must lie inside the box"));
    }

    let problem = Problem::new(dynamics, cone, target, cost, energy_bound)
        .map_err(|e| invalid("problem", e.to_string()))?;

    // Hypothesis (i) boundedness: sampled sup-norms against the declared
    // bound, warning only.
    if let Some(bound) = file.field_bound {
        let mut worst = 0.0f64;
        for p in file.state_box.sample_points(256) {
            if let Ok(v) = problem.dynamics.drift().eval(&p) {
                worst = worst.max(crate::process::euclidean_norm(&v));
            }
            for g in problem.dynamics.control_fields() {
                if let Ok(v) = g.eval(&p) {
                    worst = worst.max(crate::process::euclidean_norm(&v));
                }
            }
        }
        if worst > bound {
            log::warn!(
                "sampled field sup-norm {worst:.3e} exceeds the declared bound {bound:.3e} \
                 on the state box"
            );
        }
    }

    let step = match file.h {
        Some(h) if h > 0.0 => StepSize::Absolute(h),
        Some(_) => {
            return Err(invalid("integration step", "h must be positive"));
        }
        None => StepSize::default(),
    };

    let reference_control = file
        .reference_control
        .clone()
        .map(|recs| -> Result<ControlSignal, ScenarioError> {
            let sig = ControlSignal::try_from(recs)
                .map_err(|e| invalid("reference control", e.to_string()))?;
            if sig.control_dim() != m {
                return Err(invalid(
                    "reference control",
                    format!("control dimension must be {m}"),
                ));
            }
            sig.validate_in_cone(&problem.cone, 1e-9)
                .map_err(|e| invalid("reference control", e.to_string()))?;
            Ok(sig)
        })
        .transpose()?;

    let distance_to = file
        .distance_to
        .clone()
        .map(|recs| -> Result<ControlSignal, ScenarioError> {
            let sig = ControlSignal::try_from(recs)
                .map_err(|e| invalid("distance_to control", e.to_string()))?;
            sig.validate_in_cone(&problem.cone, 1e-9)
                .map_err(|e| invalid("distance_to control", e.to_string()))?;
            Ok(sig)
        })
        .transpose()?;

    let strict_control = file
        .strict_control
        .clone()
        .map(|recs| -> Result<StrictControl, ScenarioError> {
            let ctrl = StrictControl::try_from(recs)
                .map_err(|e| invalid("strict control", e.to_string()))?;
            if ctrl.control_dim() != m {
                return Err(invalid(
                    "strict control",
                    format!("control dimension must be {m}"),
                ));
            }
            Ok(ctrl)
        })
        .transpose()?;

    if let Some(cert) = &file.certificate {
        if cert.p_terminal.len() != n {
            return Err(invalid(
                "certificate",
                format!("p_terminal must have dimension {n}"),
            ));
        }
        if cert.pi > 0.0 || cert.lambda < 0.0 {
            return Err(invalid(
                "certificate",
                "multiplier signs: pi must be <= 0 and lambda >= 0",
            ));
        }
    }

    Ok(Scenario {
        name: file.name.clone().unwrap_or_else(|| "scenario".to_string()),
        problem,
        x0: file.x0.clone(),
        state_box: file.state_box.clone(),
        step,
        reference_control,
        strict_control,
        certificate: file.certificate.clone(),
        distance_to,
        gap_margin: file.gap_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"{{
  "name": "test",
  "n": 1, "m": 1, "m1": 0, "m2": 1,
  "f": ["0"],
  "g": [["1"]],
  "c2_generators": [[1.0]],
  "target": {{"type": "point", "t": 0.0, "x": [1.0]}},
  "cost": "t",
  "energy_bound": "inf",
  "x0": [0.0],
  "state_box": {{"lo": [-10.0], "hi": [10.0]}}{extra}
}}"#
        )
    }

    #[test]
    fn minimal_scenario_loads() {
        let sc = parse_scenario_str(&minimal("")).unwrap();
        assert_eq!(sc.name, "test");
        assert_eq!(sc.problem.dynamics.state_dim(), 1);
        assert!(sc.problem.energy_bound.is_infinite());
    }

    #[test]
    fn dimension_split_must_match() {
        let text = minimal("").replace("\"m1\": 0", "\"m1\": 1");
        match parse_scenario_str(&text) {
            Err(ScenarioError::Validation { hypothesis, .. }) => {
                assert_eq!(hypothesis, "hypothesis (iii)")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn lines_in_c2_are_rejected() {
        let text = minimal("").replace("[[1.0]]", "[[1.0], [-1.0]]");
        match parse_scenario_str(&text) {
            Err(ScenarioError::Validation { hypothesis, message }) => {
                assert_eq!(hypothesis, "hypothesis (iii)");
                assert!(message.contains("no lines"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_a_pointer() {
        let text = minimal("").replace("\"x0\": [0.0]", "\"x0\": [\"zero\"]");
        match parse_scenario_str(&text) {
            Err(ScenarioError::Schema { pointer, .. }) => {
                assert!(pointer.contains("x0"), "pointer was {pointer}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn reference_control_is_cone_checked() {
        let extra = r#",
  "reference_control": [
    {"s": 0.0, "w0": 0.0, "w": [-1.0]},
    {"s": 1.0}
  ]"#;
        match parse_scenario_str(&minimal(extra)) {
            Err(ScenarioError::Validation { message, .. }) => {
                assert!(message.contains("outside the cone"), "{message}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn expression_errors_are_validation_errors() {
        let text = minimal("").replace("[\"0\"]", "[\"x2\"]");
        assert!(matches!(
            parse_scenario_str(&text),
            Err(ScenarioError::Validation { .. })
        ));
    }

    #[test]
    fn bad_energy_bound_text_is_rejected() {
        let text = minimal("").replace("\"inf\"", "\"lots\"");
        assert!(matches!(
            parse_scenario_str(&text),
            Err(ScenarioError::Validation { .. })
        ));
    }

    #[test]
    fn level_set_targets_parse() {
        let text = minimal("").replace(
            r#"{"type": "point", "t": 0.0, "x": [1.0]}"#,
            r#"{"type": "level_set", "constraints": ["x1 - 1"]}"#,
        );
        let sc = parse_scenario_str(&text).unwrap();
        match sc.problem.target {
            TargetSpec::LevelSet { ref constraints } => assert_eq!(constraints.len(), 1),
            _ => panic!("expected a level-set target"),
        }
    }
}
