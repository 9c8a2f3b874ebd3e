use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: id {id} out of range for {bound}")]
    Index { op: &'static str, id: usize, bound: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("length error: sequence of {len} tokens exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("boundary error: source lengths sum to {sum} but sequence has {rows} rows")]
    Boundary { sum: usize, rows: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("stage error: {0}")]
    Stage(String),

    #[error("architecture mismatch; offending tensors: {}", .0.join(", "))]
    Architecture(Vec<String>),

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("name-set mismatch: missing tensor `{missing}`")]
    NameSetMismatch { missing: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
