//! Crate-wide error type.

use thiserror::Error;

/// Errors for estimation, scoring, and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown divergence `{name}` (valid: total_variation, jensen_shannon, squared_hellinger, pearson_chi2, neyman_chi2, kl, reverse_kl, jeffrey)")]
    UnknownDivergence { name: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty sample set")]
    EmptySample,

    #[error("n below minimum {min} (got {got})")]
    TooFewSamples { min: usize, got: usize },

    #[error("group size mismatch: {p} vs {q}")]
    GroupSizeMismatch { p: usize, q: usize },

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("quadrature oracle only supports dimension <= 2 (got {dim})")]
    QuadratureDimension { dim: usize },

    #[error("density ratio leaves the assumed bounds on {mass:.3e} probability mass (bounded-ratio assumption violated)")]
    RatioOutOfBounds { mass: f64 },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("non-finite function value during numeric conjugation at v={v}")]
    NonFiniteConjugand { v: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
