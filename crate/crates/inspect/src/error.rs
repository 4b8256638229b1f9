use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("record {0} not found")]
    NotFound(u64),

    #[error("record {0} is already reviewed")]
    Conflict(u64),

    #[error("image must be {expected}, got {actual}")]
    Dimensions { expected: String, actual: String },

    #[error("invalid image: {0}")]
    Image(String),

    #[error("no model loaded")]
    NoModel,

    #[error("corrupt record log: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Model(#[from] defectnet::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
