//! Crate-wide error type.

use thiserror::Error;

/// Unified error for graph ingestion, operator construction, simulation,
/// autodiff, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file or violated structural invariant during ingestion.
    #[error("schema error: {0}")]
    Schema(String),

    /// Numerically invalid value (non-finite, non-positive where required).
    #[error("value error: {0}")]
    Value(String),

    /// Out-of-range index.
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// Incompatible dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument outside its admissible interval.
    #[error("range error: {0}")]
    Range(String),

    /// Violated operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Non-finite state produced during time stepping.
    #[error("numerical instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },

    /// Loss became non-finite during training.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// Misuse of the autodiff tape API.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent experiment inputs (e.g. checkpoints from different splits).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
