use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cholesky factorisation failed for every jitter rung (largest tried {max_jitter:e})")]
    FactorizationFailure { max_jitter: f64 },

    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),

    #[error("numerical integrity violated: {0}")]
    NumericalIntegrity(String),

    #[error("affine column {column} has degenerate norm {norm:e}")]
    DegenerateWeights { column: usize, norm: f64 },

    #[error("alpha_epsilon must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("score set is empty")]
    EmptyScores,

    #[error("dataset is empty")]
    EmptyData,

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file {path}: {detail}")]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// True for failures caused by the numbers themselves rather than by
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FactorizationFailure { .. }
                | Error::NonFiniteLoss(_)
                | Error::NumericalIntegrity(_)
                | Error::DegenerateWeights { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
