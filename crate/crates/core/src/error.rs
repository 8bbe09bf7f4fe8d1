use std::path::PathBuf;

/// Errors produced anywhere in the crate.
///
/// Variants are split into validation problems (bad input, bad config) and
/// runtime failures; [`Error::exit_code`] maps them onto the CLI exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("taxonomy line {line}: {message}")]
    Taxonomy { line: usize, message: String },

    #[error("unknown node tag `{0}`")]
    UnknownTag(String),

    #[error("`{0}` is not a leaf node")]
    NotALeaf(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("volume: {0}")]
    Volume(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    CsvLib(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training(_) | Error::Io { .. } | Error::NonFinite(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
