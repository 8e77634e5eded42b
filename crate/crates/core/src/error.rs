use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("objective is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("span error: {0}")]
    Span(String),
    #[error("vocabulary error: token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("index {index} out of range for pool of size {len}")]
    Index { index: usize, len: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown relation label {0:?}")]
    Label(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("diagnostics error: {0}")]
    Diagnostics(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
