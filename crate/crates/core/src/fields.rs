//! Lie-bracket algebra over symbolic vector fields and enumeration of the
//! iterated bracket families fed to the higher-order extremality
//! conditions.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{ExprError, Expression, VectorField};

#[derive(Debug, Error)]
pub enum BracketError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Lie bracket `[h, k] = Dk h - Dh k`, computed symbolically.
pub fn lie_bracket(h: &VectorField, k: &VectorField) -> Result<VectorField, BracketError> {
    if h.dim() != k.dim() {
        return Err(BracketError::Dimension(format!(
            "bracket of fields of dimensions {} and {}",
            h.dim(),
            k.dim()
        )));
    }
    let n = h.dim();
    let dh = h.jacobian();
    let dk = k.jacobian();
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = Expression::Const(0.0);
        for j in 0..n {
            acc = Expression::add(
                acc,
                Expression::sub(
                    Expression::mul(dk[i][j].clone(), h.components()[j].clone()),
                    Expression::mul(dh[i][j].clone(), k.components()[j].clone()),
                ),
            );
        }
        components.push(acc);
    }
    Ok(VectorField::new(n, components)?)
}

/// A bracketing pattern: leaves are indices into a tuple of vector fields,
/// internal nodes are bracket applications. The derived ordering (leaves
/// before nodes, lexicographic within) is the fixed canonical order used
/// for antisymmetry deduplication.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FormalBracket {
    Leaf(usize),
    Node(Box<FormalBracket>, Box<FormalBracket>),
}

impl FormalBracket {
    pub fn leaf(i: usize) -> Self {
        FormalBracket::Leaf(i)
    }

    pub fn node(a: FormalBracket, b: FormalBracket) -> Self {
        FormalBracket::Node(Box::new(a), Box::new(b))
    }

    /// Number of leaves.
    pub fn degree(&self) -> usize {
        match self {
            FormalBracket::Leaf(_) => 1,
            FormalBracket::Node(a, b) => a.degree() + b.degree(),
        }
    }

    pub fn max_leaf(&self) -> usize {
        match self {
            FormalBracket::Leaf(i) => *i,
            FormalBracket::Node(a, b) => a.max_leaf().max(b.max_leaf()),
        }
    }

    /// Expand the pattern over a concrete field tuple into a single
    /// symbolic vector field.
    pub fn to_field(&self, fields: &[&VectorField]) -> Result<VectorField, BracketError> {
        match self {
            FormalBracket::Leaf(i) => fields
                .get(*i)
                .map(|f| (*f).clone())
                .ok_or_else(|| {
                    BracketError::Dimension(format!(
                        "leaf index {i} outside field tuple of length {}",
                        fields.len()
                    ))
                }),
            FormalBracket::Node(a, b) => {
                lie_bracket(&a.to_field(fields)?, &b.to_field(fields)?)
            }
        }
    }
}

/// Serialized as a nested s-expression over `g1..g{m1}`, e.g. `[[g1,g2],g1]`.
impl fmt::Display for FormalBracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormalBracket::Leaf(i) => write!(f, "g{}", i + 1),
            FormalBracket::Node(a, b) => write!(f, "[{a},{b}]"),
        }
    }
}

/// Evaluate a formal bracket on a field tuple at a point.
pub fn eval_formal(
    bracket: &FormalBracket,
    fields: &[&VectorField],
    x: &[f64],
) -> Result<Vec<f64>, BracketError> {
    Ok(bracket.to_field(fields)?.eval(x)?)
}

/// Which higher-order condition a family feeds. All expression fields are
/// smooth, so the two tags share the same enumeration and differ only in
/// where they are consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FamilyTag {
    B0,
    B1,
}

/// Iterated brackets of the first `m1` control fields, up to `max_degree`
/// leaves, deduplicated by antisymmetry.
#[derive(Debug, Clone)]
pub struct BracketFamily {
    pub tag: FamilyTag,
    pub m1: usize,
    pub max_degree: usize,
    pub entries: Vec<FormalBracket>,
}

/// Enumerate all bracket/leaf-assignment pairs over `g1..g{m1}` of degree
/// at most `max_degree`. At every node only `[a, b]` with `a` strictly
/// before `b` in the canonical order is kept, which drops the antisymmetric
/// mirror `[b, a]` and the syntactic zero `[a, a]`; degree-1 entries are
/// the control fields themselves.
pub fn enumerate_family(m1: usize, max_degree: usize, tag: FamilyTag) -> BracketFamily {
    let mut by_degree: Vec<Vec<FormalBracket>> = Vec::with_capacity(max_degree + 1);
    by_degree.push(Vec::new()); // degree 0 unused
    by_degree.push((0..m1).map(FormalBracket::leaf).collect());
    for d in 2..=max_degree {
        let mut level = Vec::new();
        for d1 in 1..d {
            let d2 = d - d1;
            for a in &by_degree[d1] {
                for b in &by_degree[d2] {
                    if a < b {
                        level.push(FormalBracket::node(a.clone(), b.clone()));
                    }
                }
            }
        }
        level.sort();
        level.dedup();
        by_degree.push(level);
    }
    let entries: Vec<FormalBracket> = by_degree.into_iter().skip(1).flatten().collect();
    BracketFamily {
        tag,
        m1,
        max_degree,
        entries,
    }
}
