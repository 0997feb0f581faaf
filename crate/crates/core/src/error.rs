use thiserror::Error;

/// Errors raised by the simulation, matching and experiment layers.
///
/// Matching non-convergence is deliberately absent: it is reported through
/// [`crate::matching::MatchOutcome`] because adaptive stepping consumes it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("position with norm {norm} lies outside the admissible ball of radius {radius}")]
    DomainViolation { norm: f64, radius: f64 },

    #[error("particle {particle}: {redraws} consecutive rejections at t = {time}; the micro step is too large for this state")]
    Stagnation { particle: usize, redraws: usize, time: f64 },

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
