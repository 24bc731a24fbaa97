use std::path::PathBuf;

/// Crate-wide error type. Variants mirror the failure classes the public
/// operations are contracted to report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/raster extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is invalid. Holds one message per violation.
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A serialized artifact (model file, dataset container, raster, CSV)
    /// is malformed or has the wrong version.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training diverged.
    #[error("training aborted: {0}")]
    Train(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
