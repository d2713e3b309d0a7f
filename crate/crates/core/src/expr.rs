//! Scalar expressions over state variables, with exact symbolic
//! differentiation.
//!
//! The grammar is restricted to a set of functions closed under
//! differentiation (`sin`, `cos`, `exp`, `sqrt`, arithmetic, nonnegative
//! integer powers), so Jacobians and iterated Lie brackets of expression
//! vector fields stay representable without any regularity bookkeeping.
//!
//! Grammar, in decreasing precedence (`^` binds tighter than unary minus,
//! every binary level is left-associative):
//!
//! ```text
//! expr   := term  (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)*          integer >= 0
//! atom   := number | 't' | 'x1'..'xN' | func '(' expr ')' | '(' expr ')'
//! func   := 'sin' | 'cos' | 'exp' | 'sqrt'
//! ```
//!
//! Expressions are immutable after construction; every operation here is
//! pure and safe to call concurrently on shared values.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown symbol `{name}` at byte {offset}")]
    UnknownSymbol { name: String, offset: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Variable a derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffVar {
    /// State coordinate, 0-based (`x1` has index 0).
    State(usize),
    Time,
}

/// Expression tree. `Var(i)` is the 0-based state coordinate `x{i+1}`;
/// `Time` is the free time symbol `t`. `Pow` exponents are nonnegative
/// integers, which keeps every expression smooth on its domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Const(f64),
    Var(usize),
    Time,
    Neg(Box<Expression>),
    Sin(Box<Expression>),
    Cos(Box<Expression>),
    Exp(Box<Expression>),
    Sqrt(Box<Expression>),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, u32),
}

impl Expression {
    pub fn constant(c: f64) -> Self {
        Expression::Const(c)
    }

    pub fn var(index: usize) -> Self {
        Expression::Var(index)
    }

    // Smart constructors fold literal zeros/ones and constant subtrees.
    // That is the only simplification performed anywhere in the crate:
    // derivatives are allowed to grow.

    pub fn add(a: Expression, b: Expression) -> Self {
        match (a, b) {
            (Expression::Const(x), Expression::Const(y)) => Expression::Const(x + y),
            (Expression::Const(x), b) if x == 0.0 => b,
            (a, Expression::Const(y)) if y == 0.0 => a,
            (a, b) => Expression::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expression, b: Expression) -> Self {
        match (a, b) {
            (Expression::Const(x), Expression::Const(y)) => Expression::Const(x - y),
            (a, Expression::Const(y)) if y == 0.0 => a,
            (Expression::Const(x), b) if x == 0.0 => Expression::neg(b),
            (a, b) => Expression::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expression, b: Expression) -> Self {
        match (a, b) {
            (Expression::Const(x), Expression::Const(y)) => Expression::Const(x * y),
            (Expression::Const(x), _) | (_, Expression::Const(x)) if x == 0.0 => {
                Expression::Const(0.0)
            }
            (Expression::Const(x), b) if x == 1.0 => b,
            (a, Expression::Const(y)) if y == 1.0 => a,
            (a, b) => Expression::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expression, b: Expression) -> Self {
        match (a, b) {
            (Expression::Const(x), Expression::Const(y)) if y != 0.0 => Expression::Const(x / y),
            (a, Expression::Const(y)) if y == 1.0 => a,
            (a, b) => Expression::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(e: Expression) -> Self {
        match e {
            Expression::Const(x) => Expression::Const(-x),
            e => Expression::Neg(Box::new(e)),
        }
    }

    pub fn pow(e: Expression, k: u32) -> Self {
        match (e, k) {
            (_, 0) => Expression::Const(1.0),
            (e, 1) => e,
            (Expression::Const(x), k) => Expression::Const(x.powi(k as i32)),
            (e, k) => Expression::Pow(Box::new(e), k),
        }
    }

    pub fn sin(e: Expression) -> Self {
        Expression::Sin(Box::new(e))
    }

    pub fn cos(e: Expression) -> Self {
        Expression::Cos(Box::new(e))
    }

    pub fn exp(e: Expression) -> Self {
        Expression::Exp(Box::new(e))
    }

    pub fn sqrt(e: Expression) -> Self {
        Expression::Sqrt(Box::new(e))
    }

    /// Largest state-variable index used, if any.
    pub fn max_var_index(&self) -> Option<usize> {
        match self {
            Expression::Const(_) | Expression::Time => None,
            Expression::Var(i) => Some(*i),
            Expression::Neg(e)
            | Expression::Sin(e)
            | Expression::Cos(e)
            | Expression::Exp(e)
            | Expression::Sqrt(e)
            | Expression::Pow(e, _) => e.max_var_index(),
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b) => match (a.max_var_index(), b.max_var_index()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }

    pub fn contains_time(&self) -> bool {
        match self {
            Expression::Time => true,
            Expression::Const(_) | Expression::Var(_) => false,
            Expression::Neg(e)
            | Expression::Sin(e)
            | Expression::Cos(e)
            | Expression::Exp(e)
            | Expression::Sqrt(e)
            | Expression::Pow(e, _) => e.contains_time(),
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b) => a.contains_time() || b.contains_time(),
        }
    }

    /// IEEE double evaluation of the tree at state `x` and time `t`.
    ///
    /// Division by zero and square roots of negative numbers are domain
    /// errors; other non-finite intermediate values (e.g. `exp` overflow)
    /// propagate as IEEE infinities and are caught by the integrators.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64, ExprError> {
        match self {
            Expression::Const(c) => Ok(*c),
            Expression::Var(i) => x.get(*i).copied().ok_or_else(|| {
                ExprError::Shape(format!(
                    "variable x{} out of range for point of dimension {}",
                    i + 1,
                    x.len()
                ))
            }),
            Expression::Time => Ok(t),
            Expression::Neg(e) => Ok(-e.eval(x, t)?),
            Expression::Sin(e) => Ok(e.eval(x, t)?.sin()),
            Expression::Cos(e) => Ok(e.eval(x, t)?.cos()),
            Expression::Exp(e) => Ok(e.eval(x, t)?.exp()),
            Expression::Sqrt(e) => {
                let v = e.eval(x, t)?;
                if v < 0.0 {
                    Err(ExprError::Domain(format!("sqrt of negative value {v}")))
                } else {
                    Ok(v.sqrt())
                }
            }
            Expression::Add(a, b) => Ok(a.eval(x, t)? + b.eval(x, t)?),
            Expression::Sub(a, b) => Ok(a.eval(x, t)? - b.eval(x, t)?),
            Expression::Mul(a, b) => Ok(a.eval(x, t)? * b.eval(x, t)?),
            Expression::Div(a, b) => {
                let den = b.eval(x, t)?;
                if den == 0.0 {
                    Err(ExprError::Domain("division by zero".into()))
                } else {
                    Ok(a.eval(x, t)? / den)
                }
            }
            Expression::Pow(e, k) => Ok(e.eval(x, t)?.powi(*k as i32)),
        }
    }

    /// Exact symbolic derivative with respect to `var`.
    pub fn differentiate(&self, var: DiffVar) -> Expression {
        use Expression as E;
        match self {
            E::Const(_) => E::Const(0.0),
            E::Var(i) => match var {
                DiffVar::State(j) if *i == j => E::Const(1.0),
                _ => E::Const(0.0),
            },
            E::Time => match var {
                DiffVar::Time => E::Const(1.0),
                _ => E::Const(0.0),
            },
            E::Neg(e) => E::neg(e.differentiate(var)),
            E::Sin(e) => E::mul(E::cos((**e).clone()), e.differentiate(var)),
            E::Cos(e) => E::neg(E::mul(E::sin((**e).clone()), e.differentiate(var))),
            E::Exp(e) => E::mul(E::exp((**e).clone()), e.differentiate(var)),
            E::Sqrt(e) => E::div(
                e.differentiate(var),
                E::mul(E::Const(2.0), E::sqrt((**e).clone())),
            ),
            E::Add(a, b) => E::add(a.differentiate(var), b.differentiate(var)),
            E::Sub(a, b) => E::sub(a.differentiate(var), b.differentiate(var)),
            E::Mul(a, b) => E::add(
                E::mul(a.differentiate(var), (**b).clone()),
                E::mul((**a).clone(), b.differentiate(var)),
            ),
            E::Div(a, b) => E::div(
                E::sub(
                    E::mul(a.differentiate(var), (**b).clone()),
                    E::mul((**a).clone(), b.differentiate(var)),
                ),
                E::pow((**b).clone(), 2),
            ),
            E::Pow(e, k) => E::mul(
                E::mul(E::Const(f64::from(*k)), E::pow((**e).clone(), k - 1)),
                e.differentiate(var),
            ),
        }
    }
}

/// Canonical printed form: fully parenthesized infix.
impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Const(c) => write!(f, "{c}"),
            Expression::Var(i) => write!(f, "x{}", i + 1),
            Expression::Time => write!(f, "t"),
            Expression::Neg(e) => write!(f, "(-{e})"),
            Expression::Sin(e) => write!(f, "sin({e})"),
            Expression::Cos(e) => write!(f, "cos({e})"),
            Expression::Exp(e) => write!(f, "exp({e})"),
            Expression::Sqrt(e) => write!(f, "sqrt({e})"),
            Expression::Add(a, b) => write!(f, "({a} + {b})"),
            Expression::Sub(a, b) => write!(f, "({a} - {b})"),
            Expression::Mul(a, b) => write!(f, "({a} * {b})"),
            Expression::Div(a, b) => write!(f, "({a} / {b})"),
            Expression::Pow(e, k) => write!(f, "({e} ^ {k})"),
        }
    }
}

/// Parse `text` over the universe `x1..x{n}`, `t`.
pub fn parse(text: &str, n: usize) -> Result<Expression, ExprError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        n,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        return Err(ExprError::Parse {
            offset: p.pos,
            message: format!("unexpected trailing input `{}`", &text[p.pos..]),
        });
    }
    Ok(e)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expression, ExprError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = Expression::add(acc, self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = Expression::sub(acc, self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ExprError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = Expression::mul(acc, self.unary()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    acc = Expression::div(acc, self.unary()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expression::neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expression, ExprError> {
        let mut acc = self.atom()?;
        while self.peek() == Some(b'^') {
            self.pos += 1;
            let k = self.integer()?;
            acc = Expression::pow(acc, k);
        }
        Ok(acc)
    }

    fn integer(&mut self) -> Result<u32, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ExprError::Parse {
                offset: start,
                message: "expected a nonnegative integer exponent after `^`".into(),
            });
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<u32>().map_err(|_| ExprError::Parse {
            offset: start,
            message: format!("exponent `{s}` out of range"),
        })
    }

    fn atom(&mut self) -> Result<Expression, ExprError> {
        match self.peek() {
            None => Err(ExprError::Parse {
                offset: self.pos,
                message: "expected an operand, found end of input".into(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() == Some(b')') {
                    self.pos += 1;
                    Ok(e)
                } else {
                    Err(ExprError::Parse {
                        offset: self.pos,
                        message: "expected `)`".into(),
                    })
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(c) => Err(ExprError::Parse {
                offset: self.pos,
                message: format!("unexpected character `{}`", c as char),
            }),
        }
    }

    fn number(&mut self) -> Result<Expression, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.bytes.get(self.pos), Some(b'e') | Some(b'E')) {
            // Exponent part only if followed by a (signed) digit sequence.
            let mut probe = self.pos + 1;
            if matches!(self.bytes.get(probe), Some(b'+') | Some(b'-')) {
                probe += 1;
            }
            if self.bytes.get(probe).is_some_and(u8::is_ascii_digit) {
                self.pos = probe;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<f64>()
            .map(Expression::Const)
            .map_err(|_| ExprError::Parse {
                offset: start,
                message: format!("invalid number `{s}`"),
            })
    }

    fn identifier(&mut self) -> Result<Expression, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        match name {
            "t" => Ok(Expression::Time),
            "sin" | "cos" | "exp" | "sqrt" => {
                if self.peek() != Some(b'(') {
                    return Err(ExprError::Parse {
                        offset: self.pos,
                        message: format!("expected `(` after function `{name}`"),
                    });
                }
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(ExprError::Parse {
                        offset: self.pos,
                        message: "expected `)`".into(),
                    });
                }
                self.pos += 1;
                Ok(match name {
                    "sin" => Expression::sin(arg),
                    "cos" => Expression::cos(arg),
                    "exp" => Expression::exp(arg),
                    _ => Expression::sqrt(arg),
                })
            }
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(idx) = rest.parse::<usize>() {
                        if idx >= 1 && idx <= self.n {
                            return Ok(Expression::Var(idx - 1));
                        }
                    }
                }
                Err(ExprError::UnknownSymbol {
                    name: name.to_string(),
                    offset: start,
                })
            }
        }
    }
}

/// A map from states to tangent vectors: `dim` expression components over
/// the shared variable universe `x1..x{dim}`. Vector fields are autonomous;
/// components mentioning `t` are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dim: usize,
    components: Vec<Expression>,
}

impl VectorField {
    pub fn new(dim: usize, components: Vec<Expression>) -> Result<Self, ExprError> {
        if components.len() != dim {
            return Err(ExprError::Shape(format!(
                "vector field with {} components declared dimension {dim}",
                components.len()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if let Some(maxv) = c.max_var_index() {
                if maxv >= dim {
                    return Err(ExprError::Shape(format!(
                        "component {i} uses x{} but dimension is {dim}",
                        maxv + 1
                    )));
                }
            }
            if c.contains_time() {
                return Err(ExprError::Shape(format!(
                    "component {i} depends on t; vector fields must be autonomous"
                )));
            }
        }
        Ok(VectorField { dim, components })
    }

    pub fn zero(dim: usize) -> Self {
        VectorField {
            dim,
            components: vec![Expression::Const(0.0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Expression] {
        &self.components
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x, 0.0)?;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Symbolic Jacobian; entry `[i][j]` is the derivative of component `i`
    /// with respect to `x{j+1}`.
    pub fn jacobian(&self) -> Vec<Vec<Expression>> {
        self.components
            .iter()
            .map(|c| {
                (0..self.dim)
                    .map(|j| c.differentiate(DiffVar::State(j)))
                    .collect()
            })
            .collect()
    }
}

/// Evaluate a symbolic Jacobian at a point, row-major.
pub fn eval_matrix(rows: &[Vec<Expression>], x: &[f64]) -> Result<Vec<Vec<f64>>, ExprError> {
    rows.iter()
        .map(|row| row.iter().map(|e| e.eval(x, 0.0)).collect())
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference oracle, the independent check for `differentiate`.
    pub(crate) fn central_diff(
        e: &Expression,
        x: &[f64],
        t: f64,
        var: DiffVar,
        h: f64,
    ) -> f64 {
        let mut lo = x.to_vec();
        let mut hi = x.to_vec();
        let (tlo, thi) = match var {
            DiffVar::State(j) => {
                lo[j] -= h;
                hi[j] += h;
                (t, t)
            }
            DiffVar::Time => (t - h, t + h),
        };
        (e.eval(&hi, thi).unwrap() - e.eval(&lo, tlo).unwrap()) / (2.0 * h)
    }

    /// Deterministic random expression over `n` variables, safe to evaluate
    /// on [-1.5, 1.5]^n: no division, sqrt only of 1 + (.)^2-style arguments.
    pub(crate) fn random_expression(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> Expression {
        if depth == 0 {
            return match rng.random_range(0..3) {
                0 => Expression::Const(rng.random_range(-2.0..2.0)),
                _ => Expression::Var(rng.random_range(0..n)),
            };
        }
        match rng.random_range(0..8) {
            0 => Expression::add(
                random_expression(rng, n, depth - 1),
                random_expression(rng, n, depth - 1),
            ),
            1 => Expression::sub(
                random_expression(rng, n, depth - 1),
                random_expression(rng, n, depth - 1),
            ),
            2 => Expression::mul(
                random_expression(rng, n, depth - 1),
                random_expression(rng, n, depth - 1),
            ),
            3 => Expression::sin(random_expression(rng, n, depth - 1)),
            4 => Expression::cos(random_expression(rng, n, depth - 1)),
            5 => Expression::exp(Expression::mul(
                Expression::Const(0.2),
                random_expression(rng, n, depth - 1),
            )),
            6 => Expression::sqrt(Expression::add(
                Expression::Const(1.0),
                Expression::pow(random_expression(rng, n, depth - 1), 2),
            )),
            _ => Expression::pow(random_expression(rng, n, depth - 1), rng.random_range(0..4)),
        }
    }

    pub(crate) fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn parse_builds_expected_tree() {
        let e = parse("x1*x2 + sin(x1)", 2).unwrap();
        assert_eq!(
            e,
            Expression::Add(
                Box::new(Expression::Mul(
                    Box::new(Expression::Var(0)),
                    Box::new(Expression::Var(1))
                )),
                Box::new(Expression::Sin(Box::new(Expression::Var(0))))
            )
        );
    }

    #[test]
    fn parse_truncated_input_reports_offset() {
        match parse("x1 +", 1) {
            Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn constant_power_folds() {
        let e = parse("2^3", 1).unwrap();
        assert_eq!(e.eval(&[7.0], 0.0).unwrap(), 8.0);
    }

    #[test]
    fn power_is_left_associative_and_binds_tighter_than_unary_minus() {
        let e = parse("2^3^2", 1).unwrap();
        assert_eq!(e.eval(&[0.0], 0.0).unwrap(), 64.0);
        let e = parse("-x1^2", 1).unwrap();
        assert_eq!(e.eval(&[3.0], 0.0).unwrap(), -9.0);
    }

    #[test]
    fn unknown_symbols_are_rejected() {
        assert!(matches!(
            parse("x3 + 1", 2),
            Err(ExprError::UnknownSymbol { .. })
        ));
        assert!(matches!(
            parse("y + 1", 2),
            Err(ExprError::UnknownSymbol { .. })
        ));
        // `t` is always in the universe.
        assert!(parse("t + x1", 1).is_ok());
    }

    #[test]
    fn eval_examples() {
        let e = parse("x1*x2", 2).unwrap();
        assert_eq!(e.eval(&[2.0, 3.0], 0.0).unwrap(), 6.0);
        let e = parse("sin(x1)", 1).unwrap();
        assert_eq!(e.eval(&[0.0], 0.0).unwrap(), 0.0);
        let e = parse("1/x1", 1).unwrap();
        assert!(matches!(e.eval(&[0.0], 0.0), Err(ExprError::Domain(_))));
    }

    #[test]
    fn derivative_examples() {
        let e = parse("x1*x2", 2).unwrap();
        let d = e.differentiate(DiffVar::State(0));
        for x2 in [-1.0, 0.5, 2.0] {
            assert_eq!(d.eval(&[9.0, x2], 0.0).unwrap(), x2);
        }
        let e = parse("sin(x1)", 1).unwrap();
        let d = e.differentiate(DiffVar::State(0));
        assert_eq!(d, parse("cos(x1)", 1).unwrap());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.random_range(1..4);
            let e = random_expression(&mut rng, n, 4);
            let d: Vec<Expression> = (0..n)
                .map(|j| e.differentiate(DiffVar::State(j)))
                .collect();
            for _ in 0..20 {
                let x = random_point(&mut rng, n);
                for j in 0..n {
                    let sym = d[j].eval(&x, 0.0).unwrap();
                    let num = central_diff(&e, &x, 0.0, DiffVar::State(j), 1e-6);
                    assert!(
                        (sym - num).abs() <= 1e-5 * (1.0 + sym.abs()),
                        "expr {e}: d/dx{} symbolic {sym} vs numeric {num} at {x:?}",
                        j + 1
                    );
                }
            }
        }
    }

    #[test]
    fn differentiation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = 2;
            let e1 = random_expression(&mut rng, n, 3);
            let e2 = random_expression(&mut rng, n, 3);
            let a = rng.random_range(-2.0..2.0);
            let b = rng.random_range(-2.0..2.0);
            let combo = Expression::add(
                Expression::mul(Expression::Const(a), e1.clone()),
                Expression::mul(Expression::Const(b), e2.clone()),
            );
            let d_combo = combo.differentiate(DiffVar::State(0));
            let d1 = e1.differentiate(DiffVar::State(0));
            let d2 = e2.differentiate(DiffVar::State(0));
            for _ in 0..5 {
                let x = random_point(&mut rng, n);
                let lhs = d_combo.eval(&x, 0.0).unwrap();
                let rhs = a * d1.eval(&x, 0.0).unwrap() + b * d2.eval(&x, 0.0).unwrap();
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())),
                    "linearity violated: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn print_parse_roundtrip_is_evaluation_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let n = rng.random_range(1..4);
            let e = random_expression(&mut rng, n, 4);
            let text = e.to_string();
            let back = parse(&text, n).unwrap_or_else(|err| {
                panic!("failed to reparse `{text}`: {err}");
            });
            for _ in 0..5 {
                let x = random_point(&mut rng, n);
                let v1 = e.eval(&x, 0.3).unwrap();
                let v2 = back.eval(&x, 0.3).unwrap();
                assert!(
                    (v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()),
                    "roundtrip mismatch for `{text}`: {v1} vs {v2}"
                );
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let v = VectorField::new(2, vec![parse("x2", 2).unwrap(), parse("x1", 2).unwrap()])
            .unwrap();
        let j = v.jacobian();
        let jv = eval_matrix(&j, &[3.0, -4.0]).unwrap();
        assert_eq!(jv, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);

        let c = VectorField::new(2, vec![Expression::Const(2.0), Expression::Const(-1.0)])
            .unwrap();
        let jc = eval_matrix(&c.jacobian(), &[0.3, 0.7]).unwrap();
        assert_eq!(jc, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let n = rng.random_range(1..4);
            let comps: Vec<Expression> =
                (0..n).map(|_| random_expression(&mut rng, n, 3)).collect();
            let v = VectorField::new(n, comps).unwrap();
            let j = v.jacobian();
            for _ in 0..5 {
                let x = random_point(&mut rng, n);
                let jv = eval_matrix(&j, &x).unwrap();
                for i in 0..n {
                    for col in 0..n {
                        let num =
                            central_diff(&v.components()[i], &x, 0.0, DiffVar::State(col), 1e-6);
                        assert!(
                            (jv[i][col] - num).abs() <= 1e-5 * (1.0 + jv[i][col].abs()),
                            "J[{i}][{col}] mismatch"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn vector_field_rejects_bad_shapes() {
        assert!(VectorField::new(2, vec![Expression::Const(1.0)]).is_err());
        assert!(VectorField::new(1, vec![parse("x2", 2).unwrap()]).is_err());
        assert!(VectorField::new(1, vec![parse("t", 1).unwrap()]).is_err());
    }
}
