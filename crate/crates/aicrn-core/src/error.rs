use std::fmt;
use std::io;
use std::path::PathBuf;

/// Errors produced by the tensor engine, layers, data pipeline, and training
/// loop.
#[derive(Debug)]
pub enum Error {
    /// Elementwise operands whose shapes cannot be broadcast together.
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    /// Tensor extents incompatible with the requested operation.
    Dim(String),
    /// Invalid configuration value.
    Config(String),
    /// Data ingestion, cleaning, or format failure.
    Data(String),
    /// Checkpoint file unreadable or inconsistent with its embedded config.
    Checkpoint(String),
    /// Training aborted.
    Train(String),
    /// I/O failure with file context.
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Broadcast { lhs, rhs } => {
                write!(f, "cannot broadcast shape {:?} with shape {:?}", lhs, rhs)
            }
            Error::Dim(msg) => write!(f, "dimension error: {}", msg),
            Error::Config(msg) => write!(f, "config error: {}", msg),
            Error::Data(msg) => write!(f, "data error: {}", msg),
            Error::Checkpoint(msg) => write!(f, "corrupt checkpoint: {}", msg),
            Error::Train(msg) => write!(f, "training error: {}", msg),
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
