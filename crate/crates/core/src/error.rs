use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("underdetermined calibration: {0}")]
    Underdetermined(String),
    #[error("singular calibration fit in band {band}: {reason}")]
    SingularFit { band: usize, reason: String },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("zero-norm vector at index {0}")]
    ZeroNorm(usize),
    #[error("class {name} (id {id}) has no in-variance pixels to resample from")]
    EmptyClass { id: usize, name: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
    #[error("training diverged at epoch {epoch}: {component}")]
    Diverged {
        epoch: usize,
        component: String,
        trace: Vec<crate::neural::EpochLoss>,
    },
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
