use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("score sets disagree on utterance ids; missing: {}", .missing.join(", "))]
    Fusion { missing: Vec<String> },

    #[error("missing feature files for {} utterance(s): {}", .missing.len(), .missing.join(", "))]
    MissingFeatures { missing: Vec<String> },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("cannot normalize a zero-norm vector ({0})")]
    Normalization(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
