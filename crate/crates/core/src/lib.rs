//! Toolkit for the impulsive (graph-completion) extension of control-affine
//! optimal control problems.
//!
//! The crate is organized around a pipeline:
//!
//! * [`expr`] — scalar expressions over state variables with exact symbolic
//!   differentiation; the substrate for vector fields and Jacobians.
//! * [`fields`] — Lie-bracket algebra over vector fields and enumeration of
//!   the iterated bracket families consumed by the higher-order conditions.
//! * [`cone`] — polyhedral control cones `C = C1 x C2` and Euclidean
//!   projection onto them (nonnegative least squares / Moreau decomposition).
//! * [`process`] — strict-sense and extended processes, fixed-step RK4
//!   simulation, embedding, time reparametrization and canonicalization.
//! * [`metric`] — the L1 control distances `d` and `d_tilde`, trajectory
//!   sup-distances, and the Gronwall-type stability certificate.
//! * [`target`] — endpoint target sets and their linear approximating cones.
//! * [`extremal`] — unmaximized Hamiltonian, adjoint flow, the extremality
//!   condition checker and the normal/abnormal classifier.
//! * [`gap`] — empirical probing for a local infimum gap inside an L1
//!   control ball around a reference extended process.
//! * [`scenario`] — JSON scenario ingestion and validation.

pub mod cone;
pub mod error;
pub mod expr;
pub mod extremal;
pub mod fields;
pub mod gap;
pub mod metric;
pub mod process;
pub mod scenario;
pub mod target;

pub use error::Error;
