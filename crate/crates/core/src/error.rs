use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    /// The normal matrix stayed indefinite after ridge escalation.
    #[error("singular fit (condition estimate {condition:.3e}, ridge reached {ridge:.1e})")]
    SingularFit { condition: f64, ridge: f64 },

    #[error("jet order {0} does not support this quantity (need order >= 2)")]
    UnsupportedOrder(u8),

    #[error("numerical fault in layer `{layer}`: {detail}")]
    NumericalFault { layer: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error in {}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
