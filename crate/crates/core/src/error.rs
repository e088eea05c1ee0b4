use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid growth request: {0}")]
    Growth(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("digest mismatch: header declares {declared}, content hashes to {computed}")]
    Digest { declared: String, computed: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
