use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A query point or pixel fell outside its valid domain in strict mode.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// A file failed to read, write or decode.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized document (manifest, checkpoint, scene file) is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Dataset contents violate an invariant (missing file, bad pose, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training aborted (non-finite loss, incompatible checkpoint, ...).
    #[error("training error: {0}")]
    Train(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
