//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Values are outside an operation's admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API was called in a way that violates its contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// A dataset split request cannot be satisfied by the available samples.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A training loop produced a non-finite validation loss.
    #[error("numerical divergence: {0}")]
    Diverged(String),

    /// A run configuration file could not be parsed.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// A command needs an artifact produced by an earlier phase.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    /// A checkpoint, manifest or image file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 prerequisite, 4 divergence,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Prerequisite(_) => 3,
            Error::Diverged(_) => 4,
            _ => 1,
        }
    }
}
