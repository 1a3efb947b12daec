use std::path::PathBuf;

use radfield_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} values, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("architecture mismatch at tensor `{name}`: expected {expected:?}, found {found:?}")]
    ArchitectureMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("image: {0}")]
    Image(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at iteration {iteration} (d={loss_d}, g={loss_g}, r={loss_r})")]
    NonFiniteLoss {
        iteration: u64,
        loss_d: f32,
        loss_g: f32,
        loss_r: f32,
    },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
