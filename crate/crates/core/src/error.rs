use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MaatError>;

#[derive(Debug, Error)]
pub enum MaatError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{path}: parse error at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: format error: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}: dataset has no rows")]
    EmptyDataset(PathBuf),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch} ({phase} phase): loss is not finite")]
    Divergence {
        epoch: usize,
        batch: usize,
        phase: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MaatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MaatError::Io {
            path: path.into(),
            source,
        }
    }
}
