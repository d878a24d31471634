use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sentence {id}: row {row} is the zero vector")]
    ZeroVector { id: String, row: usize },
    #[error("sentence {id}: row {row} has a non-finite entry")]
    NonFinite { id: String, row: usize },
    #[error("sentence {id}: {message}")]
    InvalidMatrix { id: String, message: String },
    #[error("duplicate sentence id {0}")]
    DuplicateId(String),
    #[error("pooled embedding norm {norm:e} is below 1e-12")]
    DegeneratePooledEmbedding { norm: f64 },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid transport problem: {0}")]
    InvalidProblem(String),
    #[error("exact solver limited to L1*L2 <= {limit}, got {rows}x{cols}")]
    ScaleExceeded {
        rows: usize,
        cols: usize,
        limit: usize,
    },
    #[error("transportation simplex exceeded {0} pivots; cycling suspected")]
    CycleSuspected(usize),
    #[error("batch shape mismatch: {0}")]
    BatchShapeMismatch(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("chunk index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sentence {0} not found in corpus")]
    MissingSentence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Guard errors (scale limits, malformed requests) versus data/internal
    /// failures; the CLI maps the former to exit code 2.
    pub fn is_guard(&self) -> bool {
        matches!(
            self,
            Error::ScaleExceeded { .. } | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
