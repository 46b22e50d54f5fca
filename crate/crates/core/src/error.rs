use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("sequence too short: need at least {need} frames, got {got}")]
    SequenceTooShort { need: usize, got: usize },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },

    #[error("training diverged at step {step}: non-finite loss or gradient")]
    Divergence { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid walker spec: {0}")]
    InvalidSpec(String),

    #[error("invalid block index {index}: model has {blocks} blocks")]
    InvalidBlock { index: usize, blocks: usize },

    #[error("empty gallery: {0}")]
    EmptyGallery(String),
}

impl Error {
    /// Process exit status: 2 usage or validation, 3 I/O and file formats,
    /// 4 divergence, 5 empty gallery.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Checkpoint(_)
            | Error::EmptySequence(_) => 3,
            Error::Divergence { .. } => 4,
            Error::EmptyGallery(_) => 5,
            _ => 2,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
