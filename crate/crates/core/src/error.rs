use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rollout blew up at step {step} (stage {stage})")]
    BlowUp { step: usize, stage: &'static str },

    #[error("optimizer diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("ensemble collapsed at time {time} (spread {spread:e})")]
    EnsembleCollapse { time: usize, spread: f64 },

    #[error("innovation matrix is singular at time {time}")]
    Singular { time: usize },

    #[error("malformed array file: {0}")]
    Format(String),

    #[error("unsupported array file: {0}")]
    Unsupported(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures (blow-up, divergence, collapse) as opposed to
    /// configuration or I/O failures.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::BlowUp { .. }
                | Error::Divergence { .. }
                | Error::EnsembleCollapse { .. }
                | Error::Singular { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format(_) | Error::Unsupported(_) | Error::Json(_)
        )
    }
}
