use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches the offending path to an I/O error.
pub fn file_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File { path: path.to_path_buf(), source }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout capacity exceeded: {requested} vehicles requested, room for {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("unsupported character {0:?}")]
    UnsupportedChar(char),

    #[error("reading {index} rejected: truth has {truth} characters, observed has {observed}")]
    LengthMismatch { index: usize, truth: usize, observed: usize },

    #[error("speed must be non-negative, got {0}")]
    NegativeSpeed(f64),

    #[error("feature history is empty")]
    EmptyHistory,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("decode error at offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
