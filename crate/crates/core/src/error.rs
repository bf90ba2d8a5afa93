use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which mixture component an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    First,
    Second,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::First => f.write_str("component 1"),
            Component::Second => f.write_str("component 2"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("test data carries no labels")]
    MissingLabels,

    #[error("degenerate posterior: {0} received no posterior mass")]
    DegeneratePosterior(Component),

    #[error("covariance estimate is singular even after ridge regularization")]
    SingularCovariance,

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("exhaustive alignment over {0} tasks exceeds the 2^25 guard; use greedy label swapping")]
    AlignmentTooLarge(usize),

    #[error("nearest-truth assignment is tied for task {0}")]
    AmbiguousAlignment(usize),

    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_task(self, index: usize) -> Error {
        match self {
            e @ Error::Task { .. } => e,
            e => Error::Task {
                index,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerical procedures (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite(_)
            | Error::DegeneratePosterior(_)
            | Error::SingularCovariance
            | Error::Bracketing(_)
            | Error::AmbiguousAlignment(_) => true,
            Error::Task { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
