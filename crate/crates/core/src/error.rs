use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A function argument violates its precondition (shape, range, ordering).
    #[error("argument error: {0}")]
    Argument(String),

    /// Training produced a non-finite loss or otherwise diverged.
    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },

    /// Metric evaluation could not be carried out.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A persisted file failed validation.
    #[error("integrity error in section `{section}`: {message}")]
    Integrity { section: String, message: String },

    /// Command-line usage error.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
