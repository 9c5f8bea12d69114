use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CenetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CenetError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{kind} id {id} out of range (vocabulary size {limit})")]
    IdOutOfRange {
        kind: &'static str,
        id: u64,
        limit: u64,
    },

    #[error("quadruples not sorted by time at index {index} (t={t} after t={previous})")]
    Unsorted { index: usize, t: u32, previous: u32 },

    #[error("timeline violation: {0}")]
    Timeline(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("context cache: {0}")]
    Cache(String),

    #[error("mask mode `{0}` needs a trained classifier but the checkpoint has none")]
    MissingClassifier(&'static str),

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("unknown ablation variant `{name}` (valid: {valid})")]
    UnknownVariant { name: String, valid: String },
}

impl CenetError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CenetError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CenetError::Io {
            path: path.into(),
            error: source,
        }
    }
}
