use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("cannot decode image {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("pixel value {0} outside [0, 255]")]
    PixelRange(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("pretrained weights unavailable for {architecture}: {detail}")]
    WeightsUnavailable { architecture: String, detail: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("serialization error on {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::WeightsUnavailable { .. } | Error::Capability(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::Decode { .. }
            | Error::LabelOutOfRange { .. }
            | Error::PixelRange(_)
            | Error::Shape(_)
            | Error::Contract(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<Path>, message: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }
}
