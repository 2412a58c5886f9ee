use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bit width {0} is not a multiple of 32")]
    NotWordAligned(usize),

    #[error("code length {0} exceeds the 32768-bit limit")]
    CodeTooLong(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("top-k budget {k} out of range for {n} candidates")]
    BudgetOutOfRange { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no valid (top, other) pairs survive masking")]
    EmptyPairs,

    #[error("no causally valid entries")]
    EmptyMask,

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("truncated file: header needs {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
