use std::path::PathBuf;

use concept_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ExplainError>;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("concept bank mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("concept index {index} out of range for {n} concepts")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}: {cause}")]
    Diverged { epoch: usize, cause: String },
    #[error("performer failed to beat the majority class: accuracy {accuracy:.4} vs majority {majority:.4}")]
    PerformerUntrainable { accuracy: f64, majority: f64 },
    #[error("cannot place {patches} patches of size {patch}×{patch} in a {height}×{width} image")]
    Placement {
        patches: usize,
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ExplainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }
}
