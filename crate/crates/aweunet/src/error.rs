use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. `Contract` maps to process exit code 2,
/// the I/O variants map to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Degenerate(_) | Error::Data(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Csv { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
