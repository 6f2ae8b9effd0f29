use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    /// A configuration file contained a key that is not recognised.
    #[error("config error: unknown key `{0}`")]
    UnknownKey(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("render error at sample {sample}: {message}")]
    Render { sample: usize, message: String },

    #[error("render error at pixel ({x}, {y}): {source}")]
    Pixel {
        x: usize,
        y: usize,
        #[source]
        source: Box<Error>,
    },

    /// A gradient or loss became NaN or infinite.
    #[error("non-finite value in parameter block `{block}`")]
    NonFinite { block: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
