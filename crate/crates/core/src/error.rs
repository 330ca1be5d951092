use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum ElsaError {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("degenerate vector (norm {norm:e})")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("score out of (0, C): score {score}, C {c}")]
    ScoreOutOfDomain { score: f64, c: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("{context}: truncated record at offset {offset}")]
    Truncated { context: &'static str, offset: u64 },

    #[error("malformed {context} at offset {offset}: {reason}")]
    Malformed {
        context: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    VersionMismatch {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ElsaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ElsaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        ElsaError::InvalidInput(msg.into())
    }

    /// True for failures of the numerical core (as opposed to bad input or IO).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ElsaError::EmptyReduction
                | ElsaError::DegenerateVector { .. }
                | ElsaError::NonFinite { .. }
                | ElsaError::ScoreOutOfDomain { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, ElsaError>;
