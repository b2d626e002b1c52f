use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TsaError {
    /// Operand shapes are incompatible for an operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row has no valid entry.
    #[error("invalid mask: row {row} has no valid position")]
    InvalidMask { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {location}: {message}")]
    Format { location: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TsaError {
    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        TsaError::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TsaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TsaError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TsaError::Config(_) | TsaError::Usage(_) => 2,
            TsaError::Data(_) | TsaError::Format { .. } | TsaError::Io { .. } => 3,
            TsaError::Dimension { .. } | TsaError::InvalidMask { .. } => 1,
        }
    }
}
