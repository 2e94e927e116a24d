//! Error type shared by all laboratory modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received arguments outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A quadrature or series tail estimate dominates the requested tolerance.
    #[error("tail error exceeds tolerance: {0}")]
    TailError(String),

    /// The sparse block family was not generated far enough to answer a query.
    #[error("insufficient horizon: {0}")]
    InsufficientHorizon(String),

    /// No plateau of the requested sign exists in the materialized profile.
    #[error("no plateau found: {0}")]
    NoPlateau(String),

    /// Simulation left the regime where the discretization is trustworthy.
    #[error("simulation diverged: {0}")]
    BlowUp(String),

    /// A linear solve or iteration failed to reach its target residual.
    #[error("solver failure: {0}")]
    Solver(String),

    /// Sign of a measured quadratic form contradicts the requested steering.
    #[error("sign mismatch: {0}")]
    SignMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("malformed data: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
