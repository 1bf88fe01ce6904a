use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: String },

    #[error("state error: {0}")]
    State(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank {rank} is not low-rank for a {d_in}x{d_out} weight")]
    AdapterRank { rank: usize, d_in: usize, d_out: usize },

    #[error("requested {requested} questions but only {capacity} distinct questions exist")]
    Capacity { requested: usize, capacity: usize },

    #[error("line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("sample of {len} tokens exceeds max_len {max_len}; refusing to truncate")]
    Truncation { len: usize, max_len: usize },

    #[error("loss mask selects no target positions")]
    EmptyTarget,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint {what} hash mismatch: manifest says {expected}, content hashes to {actual}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("tensor blob truncated: tensor {name} needs bytes up to {needed}, blob has {available}")]
    Truncated {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint stage `{stage}` is inconsistent with its tensors: {detail}")]
    StageInconsistent { stage: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
