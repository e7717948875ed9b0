//! Shared error type for the whole toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape mismatch,
    /// out-of-range index, bad threshold ordering, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The input is structurally valid but numerically degenerate
    /// (zero-norm vector, zero-area box, location outside a box, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation was invoked before the state it depends on exists
    /// (e.g. classification before prototypes are initialized).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training failure at iteration {iteration}: {message}")]
    TrainingFailure { iteration: usize, message: String },

    /// File I/O failed; the path is always carried along.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Configuration file problems, including unknown keys.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code convention: 1 for bad input, 2 for runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::DegenerateInput(_)
            | Error::UndefinedMetric(_)
            | Error::Config(_) => 1,
            // A missing input file is a user mistake, not a runtime fault.
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Error::InvalidState(_) | Error::TrainingFailure { .. } | Error::Io { .. } => 2,
        }
    }
}
