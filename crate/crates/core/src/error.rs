use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants split into three families that the command line maps to
/// exit codes: validation problems (bad shapes, configs, files), numeric
/// failures (non-finite values), and plain I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// A validation failure located by a JSON-pointer style path.
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },

    #[error("non-finite value in {op} at {location}")]
    NonFinite { op: String, location: String },

    /// Training diverged; the last checkpoint known to be finite is kept.
    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {checkpoint}")]
    Diverged {
        epoch: usize,
        step: usize,
        checkpoint: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Nests a located error under `prefix`, e.g. `/rank` under `/model/adapter`.
    pub fn under(self, prefix: &str) -> Self {
        match self {
            Error::Invalid { path, message } => Error::Invalid {
                path: format!("{prefix}{path}"),
                message,
            },
            other => other,
        }
    }

    /// True for errors caused by numerics rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
