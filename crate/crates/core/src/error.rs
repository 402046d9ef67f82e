use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range 1..={total}")]
    TimestepOutOfRange { t: usize, total: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("unknown text label `{0}`")]
    UnknownLabel(String),

    #[error("negative label `{0}` covers every component; its complement is empty")]
    EmptyComplement(String),

    #[error("noised variance of component {component} is zero at t={t}")]
    DegenerateVariance { component: usize, t: usize },

    #[error("mixture density underflows at the query point: {0}")]
    DensityUnderflow(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("condition not supported by this predictor: {0}")]
    UnsupportedCondition(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
