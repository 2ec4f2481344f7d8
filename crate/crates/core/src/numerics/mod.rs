//! Shared numeric kernels.

pub mod dare;
pub mod linalg;
pub mod normal;
pub mod qp;

use thiserror::Error;

pub use dare::{solve_dare, DareSolution};
pub use linalg::{pinv, rank, symmetrize, tikhonov_solve};
pub use normal::{cdfn, icdfn};
pub use qp::{solve_qp, solve_qp_with, QpError, QpProblem, QpSettings, QpSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("riccati iteration did not converge within {iterations} iterations")]
    DareNotConverged { iterations: usize },
    #[error("riccati limit is not stabilizing (closed-loop spectral radius {spectral_radius})")]
    DareNotStabilizing { spectral_radius: f64 },
}
