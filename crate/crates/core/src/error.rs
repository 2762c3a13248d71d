use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input files, formats, or identifiers.
    Data,
    /// Numerical or training failure.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("pgm: {msg} (byte offset {offset})")]
    Pgm { offset: usize, msg: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dimension mismatch on axis `{axis}`: {detail}")]
    Shape { axis: &'static str, detail: String },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("fusion precondition violated: {0}")]
    Fusion(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("store: {0}")]
    Store(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Degenerate(_) | Error::Optimizer(_) | Error::Fusion(_) => ErrorKind::Numeric,
            Error::Shape { .. } | Error::InvalidParam(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            detail: detail.into(),
        }
    }
}
