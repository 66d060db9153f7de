use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} bytes, file holds {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm")]
    DegenerateRow { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("class '{class}' has no rows")]
    MissingClass { class: String },

    #[error("metadata error: {0}")]
    Meta(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("rank window needs more than {k} candidates, only {available} available")]
    WindowUnderflow { available: usize, k: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
