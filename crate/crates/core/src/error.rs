use std::path::PathBuf;

use crate::numerics::MlpModel;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numerical { layer: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at episode {episode}; returning last good model")]
    Diverged {
        episode: u64,
        last_good: Box<MlpModel>,
    },

    #[error("sampling error for class {class}: {detail}")]
    Sampling { class: usize, detail: String },

    #[error("no cached target for class set {0}")]
    CacheMiss(String),

    #[error("checksum mismatch for {}", path.display())]
    Checksum { path: PathBuf },

    #[error("target cache invalidated: config hash {found} does not match {expected}")]
    CacheInvalidated { found: String, expected: String },

    #[error("missing {what}; run `metaproto {command}` first")]
    MissingPrerequisite { what: String, command: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::NonFinite(_) | Error::Diverged { .. }
        )
    }
}
