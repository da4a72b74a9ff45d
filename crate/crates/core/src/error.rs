use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("index error: {what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used in the CLI's JSON error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Intervention(_) => "intervention",
            Error::Index { .. } => "index",
            Error::Degenerate(_) => "degenerate",
            Error::Selection(_) => "selection",
            Error::Schema { .. } => "schema",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Io { .. } => "io",
            Error::Serialize(_) => "serialize",
        }
    }

    /// Process exit code: 2 for anything caused by user data or config,
    /// 3 for failures inside the tool itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Serialize(_) => 3,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}
