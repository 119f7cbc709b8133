use std::path::PathBuf;

use thiserror::Error;

use crate::fieldstore::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("field `{field}`: {reason}")]
    Field { field: String, reason: String },

    #[error("bundle failed validation ({} violation(s)); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("{path}: line {line}: {reason}")]
    Csv { path: String, line: u64, reason: String },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("cell index ({i}, {j}, {k}) outside grid {nx}x{ny}x{nz}")]
    OutOfRange { i: usize, j: usize, k: usize, nx: usize, ny: usize, nz: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("class imbalance in run `{run}` frame {frame}: {spatter} spatter vs {meltpool} melt-pool samples")]
    Imbalance { run: String, frame: usize, spatter: usize, meltpool: usize },

    #[error("feature mismatch: model expects {expected:?}, data has {found:?}")]
    FeatureMismatch { expected: Vec<String>, found: Vec<String> },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Wraps an error with the name of the stage or item that produced it.
    pub fn context(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
