//! Crate-wide error type.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown module {0}")]
    UnknownModule(String),

    #[error("already merged")]
    AlreadyMerged,

    #[error("degenerate scores: every disagreement rate is zero")]
    DegenerateScores,

    #[error("joint allocation needs at least two module kinds; use separate mode")]
    SingleKindJoint,

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged (loss is not finite) at epoch {epoch}, step {step} with {config}")]
    Diverged {
        epoch: usize,
        step: usize,
        config: String,
    },

    #[error("plan validation failed: {0}")]
    PlanViolation(String),

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attaches the file the error arose from, unless it already names one.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::Csv { .. } | Error::InFile { .. }) => e,
            e => Error::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}
