use std::path::PathBuf;

use crate::gradcore::GradError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("invalid architecture: {0}")]
    Spec(String),

    #[error("parameter layout: {0}")]
    Layout(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    /// A non-finite value during an unroll or meta-step; the iteration is skipped.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("distillation: {0}")]
    Distill(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
