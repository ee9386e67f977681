//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while building or running an experiment.
#[derive(Debug, Error)]
pub enum SfError {
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A coefficient closure produced a non-finite value.
    #[error("coefficient evaluation failed: {0}")]
    Evaluation(String),

    /// Dimensions or shapes of the supplied fields do not line up.
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// A trajectory left the admissible region before the horizon.
    #[error("trajectory blew up at t = {t:.6}: |state| = {magnitude:.3e}")]
    Blowup {
        t: f64,
        magnitude: f64,
        state: Vec<f64>,
    },

    /// A numerical routine failed to converge or lost positivity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Not enough data to produce a statistically meaningful answer.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The requested operation violates a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A named model or resource does not exist.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Filesystem or serialization trouble.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SfError {
    fn from(e: std::io::Error) -> Self {
        SfError::Io(e.to_string())
    }
}

/// Crate-wide result alias.
pub type SfResult<T> = Result<T, SfError>;
