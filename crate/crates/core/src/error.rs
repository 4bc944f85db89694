use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure surfaced by the library. Display strings start with the
/// variant name so CLI diagnostics are greppable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("UnreadableFile: {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("UnsupportedFormat: {0}")]
    UnsupportedFormat(String),

    #[error(
        "ValueOutOfRange: value {value} at linear index {index} is not a probability in [0, 1]"
    )]
    ValueOutOfRange { index: usize, value: f64 },

    #[error("BadShape: {0}")]
    BadShape(String),

    #[error("UnwritableDestination: {path}: {reason}")]
    UnwritableDestination { path: PathBuf, reason: String },

    #[error("EmptyRegion: a candidate region must contain at least one voxel")]
    EmptyRegion,

    #[error("ProbabilityOutOfRange: component {index} has value {value}")]
    ProbabilityOutOfRange { index: usize, value: f64 },

    #[error("EmptyInput: {0}")]
    EmptyInput(String),

    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("PlacementInfeasible: {0}")]
    PlacementInfeasible(String),

    #[error("AssumptionViolated: {0}")]
    AssumptionViolated(String),

    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnreadableFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn unwritable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnwritableDestination {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn in_record(self, index: usize) -> Self {
        Error::Record {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures caused by bad inputs rather than by a broken
    /// internal guarantee.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::AssumptionViolated(_) => false,
            Error::Record { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}
