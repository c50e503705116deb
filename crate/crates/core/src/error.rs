use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("softmax row {row} has no allowed key positions")]
    EmptySoftmaxRow { row: usize },

    #[error("Jacobi SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("decomposition of {pair} head {head} failed: {source}")]
    Decomposition {
        pair: &'static str,
        head: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("frozen parameters changed at step {step}")]
    FrozenMutated { step: usize },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

/// Failure kinds reported while reading or writing a tensor archive.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("unsupported archive version {found:?} (expected {expected:?})")]
    Version { found: String, expected: &'static str },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("overlapping tensors {first:?} and {second:?}")]
    Overlap { first: String, second: String },

    #[error("tensor {name:?} contains non-finite values")]
    NonFinite { name: String },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("malformed archive: {0}")]
    Malformed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
