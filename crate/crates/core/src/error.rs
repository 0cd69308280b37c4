use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by `{kind}` (node {index})")]
    NonFinite { kind: &'static str, index: usize },

    #[error("non-finite evaluation: {0}")]
    NonFiniteEvaluation(String),

    #[error("matrix is not positive definite after jitter ladder {ladder:?}")]
    NotPositiveDefinite { ladder: Vec<f64> },

    #[error("cholesky factor has non-positive diagonal entry {value} at {index}")]
    InvalidFactor { index: usize, value: f64 },

    #[error("unsupported derivative order: {0}")]
    UnsupportedOrder(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown problem `{0}` (expected one of heat1d, heat50d, adr50d)")]
    UnknownProblem(String),

    #[error("sampler aborted: warmup acceptance rate {rate:.4} below {threshold}")]
    LowAcceptance { rate: f64, threshold: f64 },

    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize, trace: Vec<f64> },

    #[error("all {0} posterior draws failed during prediction")]
    AllDrawsFailed(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
