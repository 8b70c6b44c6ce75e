use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("base kernel {index} is not symmetric (max asymmetry {max_asym:.3e} relative)")]
    NotSymmetric { index: usize, max_asym: f64 },

    #[error(
        "base kernel {index} is not positive semidefinite \
         (smallest eigenvalue {min_eig:.3e}, largest {max_eig:.3e})"
    )]
    NotPsd {
        index: usize,
        min_eig: f64,
        max_eig: f64,
    },

    #[error(
        "Cholesky factorisation broke down at pivot {pivot} \
         (matrix indefinite beyond the jitter level)"
    )]
    CholeskyBreakdown { pivot: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {value} at index {index} is outside the likelihood's domain {domain}")]
    InvalidLabel {
        index: usize,
        value: f64,
        domain: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} did not converge within {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error(
        "the {0} loss has no likelihood counterpart (no normalisable density \
         induces it), so likelihood-based objectives cannot use it; \
         only the regularised-risk documentation entry exists"
    )]
    LossWithoutLikelihood(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
