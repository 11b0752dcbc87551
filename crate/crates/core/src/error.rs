use thiserror::Error;

/// Errors raised anywhere in the prompt-tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequence of {len} tokens exceeds the maximum text length {max}")]
    Truncation { len: usize, max: usize },

    #[error("caption cache: {0}")]
    Cache(String),

    #[error("k-means: {0}")]
    Instance(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
