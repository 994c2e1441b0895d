use std::path::PathBuf;

use crate::calibrate::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed something structurally wrong (empty input, shape mismatch, bad count).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input lies outside the domain of a density or special function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset content violates an invariant (missing class, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    /// Training loss diverged. The trace up to the divergence is kept for callers
    /// that want to report or exclude the run.
    #[error("calibration diverged after {} epoch(s)", .trace.epoch_losses.len())]
    Calibration { trace: Box<TrainTrace> },

    /// Every candidate in a hyperparameter grid diverged.
    #[error("all {0} beta setting(s) diverged")]
    AllDiverged(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the errors that mean "this optimization run blew up".
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Calibration { .. } | Error::AllDiverged(_))
    }
}
