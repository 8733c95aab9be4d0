use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("non-finite loss in {stage} at epoch {epoch}, batch {batch}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("artifact hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("output directory {0} is locked by another pipeline")]
    Locked(PathBuf),

    #[error(transparent)]
    Tensor(#[from] adaperf_autograd::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
