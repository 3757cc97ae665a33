use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {what} at anchor {anchor}")]
    NonFinite { what: &'static str, anchor: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("hard-negative strategy {0} needs ground truth for the unlabeled image")]
    MissingGroundTruth(&'static str),

    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint architecture does not match: {0}")]
    ArchMismatch(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
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

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Short category name, used for CLI exit codes and logs.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numeric",
            Error::InvalidConfig(_) | Error::MissingGroundTruth(_) | Error::Json { .. } => "config",
            Error::EmptyDataset(_) => "data",
            Error::BadMagic
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::ArchMismatch(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
