use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("network error fetching {url}: {message}")]
    Network { url: String, message: String },

    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("input width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("model file is corrupt: {0}")]
    CorruptModel(String),

    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    ModelVersion { found: u32, supported: u32 },

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("tree error: {0}")]
    Tree(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
