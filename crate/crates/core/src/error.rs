use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A row norm fell below the normalization guard.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A scalar parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or received a non-finite value.
    #[error("training error at task {task}, step {step}: {message}")]
    Training {
        task: usize,
        step: usize,
        message: String,
    },

    /// A persisted artifact is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
