use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClaspError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown concept for text {0:?}")]
    Lookup(String),

    #[error("empty region: nothing to embed")]
    EmptyRegion,

    #[error("granularity {requested} exceeds {available} foreground tokens")]
    GranularityDegenerate { requested: usize, available: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checksum mismatch for tensor {tensor:?}")]
    Checksum { tensor: String },

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ClaspError> = std::result::Result<T, E>;
