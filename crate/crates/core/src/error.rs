//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("archive {path}: {msg}")]
    Archive { path: String, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config value for `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("skinning is rank deficient: node {node} has no skinned vertex")]
    RankDeficientSkinning { node: usize },

    #[error("column {column} is numerically dependent (pivot {pivot:.3e})")]
    DependentColumn { column: usize, pivot: f64 },

    #[error("non-finite {what} in block `{block}`")]
    NonFinite { what: String, block: String },

    #[error("optimization diverged at iteration {iteration} (loss {loss:.3e}); recent: {recent}")]
    Diverged {
        iteration: usize,
        loss: f64,
        recent: String,
    },

    #[error("model is invisible: no vertex passed visibility in any frame")]
    ModelInvisible,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    pub fn archive(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Archive {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}
