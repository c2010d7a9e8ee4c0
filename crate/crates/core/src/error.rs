use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {map}: expected {expected}, got {got}")]
    Shape {
        map: String,
        expected: String,
        got: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("non-finite {component} loss at step {step}: {detail}")]
    NonFinite {
        component: String,
        step: u64,
        detail: String,
    },

    #[error("zero-shot contract violated: {0}")]
    Contract(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(map: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            map: map.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
