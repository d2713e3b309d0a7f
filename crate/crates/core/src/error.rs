//! Crate-wide error type and exit-code classification.

use thiserror::Error;

/// How an error should be surfaced by a command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent user input (scenario files, expressions,
    /// cone data). Conventionally exit code 2.
    Validation,
    /// A numerical failure while operating on valid input (overflow,
    /// domain errors, degenerate clocks). Conventionally exit code 3.
    Numerical,
}

/// Union of the module-level errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("expr: {0}")]
    Expr(#[from] crate::expr::ExprError),
    #[error("fields: {0}")]
    Fields(#[from] crate::fields::BracketError),
    #[error("cone: {0}")]
    Cone(#[from] crate::cone::ConeError),
    #[error("process: {0}")]
    Process(#[from] crate::process::ProcessError),
    #[error("metric: {0}")]
    Metric(#[from] crate::metric::MetricError),
    #[error("extremal: {0}")]
    Extremal(#[from] crate::extremal::ExtremalError),
    #[error("gap: {0}")]
    Gap(#[from] crate::gap::GapError),
    #[error("scenario: {0}")]
    Scenario(#[from] crate::scenario::ScenarioError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use crate::expr::ExprError;
        match self {
            Error::Expr(e) => match e {
                ExprError::Domain(_) => ErrorClass::Numerical,
                _ => ErrorClass::Validation,
            },
            Error::Fields(_) => ErrorClass::Validation,
            Error::Cone(e) => match e {
                crate::cone::ConeError::Degenerate(_) => ErrorClass::Numerical,
                _ => ErrorClass::Validation,
            },
            Error::Process(e) => match e {
                crate::process::ProcessError::InvalidSignal(_) => ErrorClass::Validation,
                crate::process::ProcessError::Expr(ExprError::Domain(_)) => ErrorClass::Numerical,
                crate::process::ProcessError::Expr(_) => ErrorClass::Validation,
                _ => ErrorClass::Numerical,
            },
            Error::Metric(_) => ErrorClass::Numerical,
            Error::Extremal(e) => match e {
                crate::extremal::ExtremalError::InvalidMultiplier(_)
                | crate::extremal::ExtremalError::RankDeficientTarget(_)
                | crate::extremal::ExtremalError::Dimension(_) => ErrorClass::Validation,
                _ => ErrorClass::Numerical,
            },
            Error::Gap(_) => ErrorClass::Numerical,
            Error::Scenario(_) => ErrorClass::Validation,
        }
    }
}
