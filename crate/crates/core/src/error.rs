use std::path::PathBuf;

use crate::workload::SessionId;

/// Errors surfaced by the simulator, its loaders and the metrics pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invariant `{invariant}` violated at seq {seq}: {detail}")]
    Invariant {
        invariant: &'static str,
        seq: u64,
        detail: String,
    },

    #[error("log integrity error for session {session}: {detail}")]
    Integrity { session: SessionId, detail: String },

    #[error("simulation stalled at t={time}s: {detail}")]
    Stalled { time: f64, detail: String },

    #[error("refusing to compare runs: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
