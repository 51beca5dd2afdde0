//! Crate-wide error type. Variants are grouped so the command-line frontend
//! can map them onto stable exit codes.

/// Exit-code category for an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad arguments, bad config, violated preconditions.
    Usage,
    /// Malformed or empty data.
    Data,
    /// Filesystem problems.
    Io,
    /// Everything else.
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Kernel(#[from] tapegrad::KernelError),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::Contract(_) | Error::Config(_) => {
                ErrorCategory::Usage
            }
            Error::Degenerate(_) | Error::Parse { .. } | Error::EmptyInput(_) => ErrorCategory::Data,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Kernel(tapegrad::KernelError::Io { .. }) => ErrorCategory::Io,
            Error::Kernel(_) => ErrorCategory::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
