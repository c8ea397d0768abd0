//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Configuration problems are
//! reported eagerly (at construction / validation time) rather than deep inside a
//! training loop.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) do not line up for `op`.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An invalid configuration value, detected before any compute happens.
    #[error("invalid config: {0}")]
    Config(String),

    /// A token sequence does not fit the model's positional table.
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A loss was requested over a batch whose mask excludes every position.
    #[error("loss mask excludes every position in the batch")]
    EmptyLoss,

    /// A scalar was expected (e.g. as a loss) but the value has another shape.
    #[error("expected a scalar value, found shape {0:?}")]
    NotScalar(Vec<usize>),

    /// A token id at or beyond the vocabulary size.
    #[error("token id {id} out of range for vocab_size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Pretraining did not reach the held-in QA accuracy bar. The accuracy curve
    /// (step, accuracy) is carried along so callers can dump it for diagnosis.
    #[error(
        "pretraining failed: best held-in QA accuracy {best:.3} < target {target:.3} \
         after {steps} steps"
    )]
    TrainingFailure {
        target: f64,
        best: f64,
        steps: usize,
        curve: Vec<(usize, f64)>,
    },

    /// A checkpoint file is malformed, truncated, or fails its checksum.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
