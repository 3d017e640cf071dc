//! Coupled mean-shift dynamics for in-context classification, the
//! attention-only transformer they are extracted from, and the tooling to
//! train, compare and verify both.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; index loops
// mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fingerprints;
pub mod linalg;
pub mod par;
pub mod plot;
pub mod rng;
pub mod task_gen;
pub mod theory;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
