//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The SVD iteration did not converge within the allowed sweeps.
    #[error("SVD did not converge after {iterations} iterations")]
    SvdNonConvergence { iterations: usize },

    /// Incompatible matrix/sequence dimensions for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite value appeared while propagating a trajectory.
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    /// Invalid configuration or file contents.
    #[error("invalid {what}: {why}")]
    Invalid { what: String, why: String },

    /// A benchmark condition needs a trained model that was not supplied.
    #[error("no model available for condition `{condition}`")]
    MissingModel { condition: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            why: why.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
