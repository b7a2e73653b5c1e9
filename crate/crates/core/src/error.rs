use thiserror::Error;

/// Errors produced by the library.
///
/// Variants fall into two families that the CLI maps onto exit codes:
/// input problems (exit 2) and numerical failures (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point outside basis domain: {0}")]
    OutsideDomain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("rank-zero design")]
    RankZeroDesign,

    #[error("matrix is not definite non-negative: min eigenvalue {min_eig:e}, largest {max_eig:e}")]
    NotDnn { min_eig: f64, max_eig: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// `true` for failures caused by the numbers rather than the input shape.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankZeroDesign | Error::NotDnn { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
