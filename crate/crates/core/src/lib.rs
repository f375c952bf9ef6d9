//! Weighted instruction tuning at desk scale: a loss that weights prompt and
//! response tokens separately, a small trainable transformer, a preference
//! alignment stage, and the sweep/analysis tooling around them.

// `!(x >= 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
