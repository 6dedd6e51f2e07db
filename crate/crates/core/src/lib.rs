//! Sequential Bayesian forecasting: dynamic-linear-model agents, Bayesian
//! predictive synthesis by Gibbs sampling, linear forecast pools, and the
//! simulation and theory experiments built on them.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bps;
pub mod combine;
pub mod dlm;
pub mod error;
pub(crate) mod linalg;
pub mod simlab;
pub mod statdist;
pub mod theorylab;

pub use error::{Error, Result};
