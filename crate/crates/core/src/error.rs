use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at mode {mode}: expected {expected}, found {found}")]
    ModeMismatch { mode: usize, expected: usize, found: usize },

    #[error("element count mismatch: {expected} elements expected, {found} given")]
    ElementCount { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bond {bond} rank {rank} exceeds the orthogonalizable bound {bound}")]
    RankBound { bond: usize, rank: usize, bound: usize },

    #[error("tensor train has no canonical center")]
    CenterUnset,

    #[error("weight vector for mode {mode} collapsed to zero; the next subproblem is unbounded")]
    DegenerateWeight { mode: usize },

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("{path}: {message} (byte offset {offset})")]
    Format { path: String, offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
