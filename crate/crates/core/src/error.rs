use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("artifact corrupted: {0}")]
    Corrupt(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unknown layer `{name}`; valid layers: {valid}")]
    UnknownLayer { name: String, valid: String },

    #[error("run store: {0}")]
    Store(String),

    #[error("promotion refused: {0}")]
    PromotionRefused(String),

    #[error("no active model")]
    NoModel,

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Dataset(_) => "dataset",
            Error::Corrupt(_) => "corrupt",
            Error::Diverged(_) => "diverged",
            Error::UnknownLayer { .. } => "unknown_layer",
            Error::Store(_) => "store",
            Error::PromotionRefused(_) => "promotion_refused",
            Error::NoModel => "no_model",
            Error::Decode(_) => "decode",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
