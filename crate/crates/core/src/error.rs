//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Pixel or index outside the valid range.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// Rejection sampling failed to place objects without overlap.
    #[error("placement failed: {0}")]
    Placement(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    /// Density threshold left no points in the field.
    #[error("empty field: no density above threshold {0}")]
    EmptyField(f64),

    /// Malformed input data, bad config, or checkpoint version mismatch.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for data problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
