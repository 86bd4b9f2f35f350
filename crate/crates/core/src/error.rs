use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with zero norm")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("k = {k} exceeds usable population {population}")]
    KTooLarge { k: usize, population: usize },

    #[error("Bessel evaluation failed in the {regime} regime (order {order}, argument {x})")]
    Bessel { regime: &'static str, order: f64, x: f64 },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed DOEB data at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 for configuration and argument problems, 3 for numerical failures,
    /// 4 for I/O and file-format problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::LabelOutOfRange { .. }
            | Error::KTooLarge { .. }
            | Error::DimensionMismatch { .. } => 2,
            Error::ZeroNorm | Error::Bessel { .. } | Error::NonFiniteLoss { .. } => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
        }
    }
}
