//! Variational f-divergence estimation and truthful sample-elicitation
//! scoring mechanisms, with a synthetic-Gaussian simulation harness.

pub mod critic;
pub mod error;
pub mod estimator;
pub mod fdiv;
pub mod seeds;

pub(crate) mod linalg;

pub use error::{Error, Result};
