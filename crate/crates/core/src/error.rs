use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid footprint: {0}")]
    InvalidFootprint(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("adjacency structure: BAU {index} has no valid neighbour")]
    IsolatedBau { index: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("numerical failure at t={time}: {message}")]
    Numerical { time: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("exact E-step refused: N={n} exceeds the cap of {cap}")]
    ExactModeTooLarge { n: usize, cap: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach a time index to a numerical failure coming from a lower layer.
    pub(crate) fn at_time(self, time: usize) -> Self {
        match self {
            Error::NotPositiveDefinite { pivot } => Error::Numerical {
                time,
                message: format!("factorization failed at pivot {pivot}"),
            },
            Error::Numerical { message, .. } => Error::Numerical { time, message },
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::NotPositiveDefinite { .. })
    }
}
