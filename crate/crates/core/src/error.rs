use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("softmax: row {row} has every position masked")]
    DegenerateRow { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("video with {frames} frames is too short for one {snippet}-frame snippet")]
    TooShort { frames: usize, snippet: usize },

    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("video has {snippets} snippets, exceeding the fixed duration {duration}")]
    ExceedsDuration { snippets: usize, duration: usize },

    #[error("annotation error in video {video}: interval [{onset}, {offset}] {reason}")]
    Annotation {
        video: String,
        onset: usize,
        offset: usize,
        reason: String,
    },

    #[error("no valid timestamps")]
    NoValidTimestamps,

    #[error("cannot pack the requested expressions into video {video}")]
    InfeasiblePacking { video: String },

    #[error("leave-one-subject-out needs at least two subjects, found {0}")]
    TooFewSubjects(usize),

    #[error("no folds to aggregate")]
    EmptyFolds,

    #[error("unknown video id {0}")]
    UnknownVideo(String),

    #[error("non-finite loss at epoch {epoch} (video {video}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        video: String,
        detail: String,
    },

    #[error("checkpoint does not match the configuration: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in the numerics rather than in the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::DegenerateRow { .. }
        )
    }
}
