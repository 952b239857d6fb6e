use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("voxel index {index:?} out of bounds for dims {dims:?}")]
    OutOfBounds { index: [i64; 3], dims: [usize; 3] },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: header implies {expected} bytes, payload has {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("invalid interactions: {0}")]
    Interactions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
