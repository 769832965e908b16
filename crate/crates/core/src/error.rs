//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input vector or model had the wrong dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration (constructor parameters, step sizes, generator
    /// settings) was rejected before any computation ran.
    #[error("configuration error: {0}")]
    Config(String),

    /// A counterfactual search could not find any feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The sampling distribution is not absolutely continuous with
    /// respect to the reference distribution.
    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),

    /// A pair of datasets does not form a valid perturbation.
    #[error("perturbation spec error: {0}")]
    PerturbationSpec(String),

    /// An internal invariant failed; indicates a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
