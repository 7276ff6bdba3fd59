use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
///
/// Variants are grouped by the exit code the CLI maps them to: configuration
/// problems, bad or inconsistent data, and numerical degeneracy.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{bad} of {total} records malformed (limit {limit}); first: {first}")]
    TooManyMalformed {
        bad: usize,
        total: usize,
        limit: f64,
        first: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("stage {stage} failed ({path}): {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str, path: impl Into<PathBuf>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Parse(_)
            | Error::TooManyMalformed { .. }
            | Error::Shape(_)
            | Error::Integrity(_)
            | Error::Empty(_) => 3,
            Error::Degenerate(_) | Error::NotConverged { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
