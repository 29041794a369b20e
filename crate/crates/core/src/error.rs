use std::path::PathBuf;

/// Error type shared across the library. Validation failures carry enough
/// context to identify the offending input without a debugger.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed input file. `detail` includes serde's line/column when the
    /// failure came from JSON parsing.
    #[error("{path}: {detail}")]
    Schema { path: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("layout must contain exactly one subject, found {0}")]
    SubjectCount(usize),

    #[error("degenerate bbox: {0}")]
    DegenerateBox(String),

    #[error("subject does not fit canvas: {0}")]
    SubjectTooLarge(String),

    #[error("subject mask is empty")]
    EmptyMask,

    #[error("scene grammar unsatisfiable after {attempts} attempts ({rule})")]
    GrammarUnsatisfiable { attempts: usize, rule: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn schema(path: impl std::fmt::Display, detail: impl std::fmt::Display) -> Self {
        Error::Schema { path: path.to_string(), detail: detail.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
