use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("design matrix is rank deficient (rank {rank}, need {needed})")]
    RankDeficient { rank: usize, needed: usize },

    #[error("quadrature grid misses {0:e} of the probability mass")]
    InsufficientCoverage(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {what} at iteration {iter} (t = {t})")]
    NonFinite {
        what: &'static str,
        iter: usize,
        t: usize,
    },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
