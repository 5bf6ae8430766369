use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid batch layout: {0}")]
    InvalidLayout(String),

    #[error("original-instance features required for mean source `original`")]
    MissingOriginals,

    #[error("instance {0} has no views")]
    EmptyInstance(usize),

    #[error("covariance is not positive definite (pivot {pivot} = {value:e}); raise the ridge")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("covariance has no factorization for instance {0}")]
    Unfactorized(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("misaligned tables: {0}")]
    Misaligned(String),

    #[error("need at least two classes, found {0}")]
    SingleClass(usize),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("numerical failure at epoch {epoch}, step {step}: {detail}")]
    Numerical {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
