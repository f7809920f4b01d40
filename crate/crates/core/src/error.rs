use thiserror::Error;

/// Errors raised by the unmixing library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsuError {
    /// Invalid argument: bad shape, out-of-range index, non-finite value.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The request is valid but exceeds what the implementation supports.
    #[error("unsupported: {0}")]
    Capability(String),

    /// A numerical failure (non positive-definite matrix, degenerate distribution).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// A sampler step failed at a given iteration.
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<CsuError>,
    },

    /// File format or I/O problem.
    #[error("i/o: {0}")]
    Io(String),
}

impl CsuError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CsuError::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        CsuError::Numeric(msg.into())
    }

    /// True when the error (or the error it wraps) is a numerical failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            CsuError::Numeric(_) => true,
            CsuError::AtIteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for CsuError {
    fn from(e: std::io::Error) -> Self {
        CsuError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CsuError>;
