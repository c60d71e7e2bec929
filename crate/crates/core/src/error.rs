use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("measurement channel {0} has zero variance, SNR is undefined")]
    ZeroVarianceChannel(usize),

    #[error("innovation covariance is not invertible at step {step}")]
    SingularInnovation { step: usize },

    #[error("predicted covariance is not invertible at step {step}")]
    SingularPrediction { step: usize },

    #[error("cholesky factorization failed with jitter up to {max_jitter:e}")]
    Cholesky { max_jitter: f64 },

    #[error("ill-conditioned information matrix (condition number {0:e})")]
    IllConditioned(f64),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("vehicle {vehicle}: {source}")]
    Vehicle {
        vehicle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Attach the 1-based vehicle index to an error raised inside a run.
    pub fn in_vehicle(self, vehicle: usize) -> Self {
        Error::Vehicle {
            vehicle,
            source: Box::new(self),
        }
    }

    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::InvalidParameter { .. }
            | Error::Dimension(_)
            | Error::Dataset(_)
            | Error::Config(_)
            | Error::ZeroVarianceChannel(_) => true,
            Error::Vehicle { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
