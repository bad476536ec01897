use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Cholesky factorisation failed for {block}: matrix not positive definite")]
    CholeskyFailed { block: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ELBO decreased by {drop:.3e} at grid point (tau={tau}, sigma={sigma}), iteration {iteration}")]
    ElboNotMonotone {
        tau: f64,
        sigma: f64,
        iteration: usize,
        drop: f64,
    },

    #[error("grid point (tau={tau}, sigma={sigma}) failed: {source}")]
    GridPointFailed {
        tau: f64,
        sigma: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("series truncation bound exceeded ({0})")]
    TruncationExceeded(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Tag a Cholesky failure with the parameter block it came from, so a
    /// numerical blow-up names its victim.
    pub fn chol(block: impl Into<String>) -> Self {
        Error::CholeskyFailed {
            block: block.into(),
        }
    }
}
