//! Error type shared by every solver stage.

use thiserror::Error;

/// Coarse classification used to map errors onto process exit codes and
/// FFI status codes: bad input, violated mathematical precondition, or
/// numerical failure at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed input: I/O, parsing, dimension mismatches.
    Usage,
    /// A mathematical precondition fails (definiteness, stabilizability).
    Precondition,
    /// A numerically well-posed run broke down (singularity, divergence).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "positive-definiteness condition violated: min eig(R-block) = {min_eig_r:.6e}, \
         min eig(Q-block Schur complement) = {min_eig_schur:?}"
    )]
    PdcViolated {
        min_eig_r: f64,
        /// `None` when the R-block is not invertible, so the Schur
        /// complement could not be formed.
        min_eig_schur: Option<f64>,
    },

    #[error("gain is not a mean-field L2 stabilizer: {0}")]
    NotStabilizer(String),

    #[error("linear system not solvable: {0}")]
    NotSolvable(String),

    #[error("inner weighting matrix is singular or indefinite: {0}")]
    SingularInnerTerm(String),

    #[error(
        "rank-deficient least-squares system for {system}: rank {rank} < required {required}"
    )]
    RankDeficient {
        system: &'static str,
        rank: usize,
        required: usize,
    },

    #[error("trajectory diverged (non-finite state) at path {path}, step {step}")]
    Diverged { path: usize, step: usize },

    #[error(
        "no convergence after {limit} iterations: |dP| = {delta_p:.3e}, |dPhat| = {delta_phat:.3e}"
    )]
    MaxIterationsExceeded {
        limit: usize,
        delta_p: f64,
        delta_phat: f64,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension(_) | Error::Io(_) | Error::Parse(_) | Error::InvalidInput(_) => {
                ErrorClass::Usage
            }
            Error::PdcViolated { .. } | Error::NotStabilizer(_) => ErrorClass::Precondition,
            Error::NotSolvable(_)
            | Error::SingularInnerTerm(_)
            | Error::RankDeficient { .. }
            | Error::Diverged { .. }
            | Error::MaxIterationsExceeded { .. } => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
