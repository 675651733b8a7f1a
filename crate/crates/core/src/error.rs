use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("coverage is undefined for a bank with fewer than two tokens")]
    UndefinedCoverage,

    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),

    #[error("non-finite loss component `{part}`")]
    NonFinite { part: &'static str },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("pipeline init failed: {0}")]
    Init(String),

    #[error("fusion failed: {0}")]
    Fusion(String),

    #[error("gradient undefined: {0}")]
    GradientUndefined(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
