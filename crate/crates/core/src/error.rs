//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid timestep {t} (valid range {lo}..={hi})")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("image too small: {width}x{height} cannot hold {need_width}x{need_height}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        need_height: usize,
        need_width: usize,
    },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("empty score list")]
    EmptyScores,

    #[error("feature dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate sample id: {0}")]
    DuplicateId(String),

    #[error("missing field `{field}` at line {line}")]
    MissingField { line: usize, field: String },

    #[error("bonafide entry `{0}` has no subject id")]
    MissingSubject(String),

    #[error("empty decision subset")]
    EmptySubset,

    #[error("autoencoder variant mismatch: expected {expected}, got {actual}")]
    WrongVariant { expected: String, actual: String },

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand used by tensor ops.
    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
