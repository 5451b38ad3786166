use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid labels: {0}")]
    Label(String),

    #[error("degenerate transform: determinant {det:e}")]
    DegenerateTransform { det: f64 },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed file: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
