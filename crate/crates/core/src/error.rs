use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// `InvalidInput` and `InvalidConfig` are caller mistakes (exit status 1 at the
/// command line); everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum LadaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Failed(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl LadaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LadaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LadaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LadaError::InvalidInput(_) | LadaError::InvalidConfig(_) | LadaError::Shape { .. }
        )
    }
}

pub type Result<T, E = LadaError> = std::result::Result<T, E>;
