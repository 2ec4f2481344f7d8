//! Discrete algebraic Riccati equation and the associated LQR gain.

use nalgebra::DMatrix;

use super::linalg::{spectral_radius, symmetrize};
use super::NumericsError;

/// Convergence threshold on `‖P_{k+1} − P_k‖_F / (1 + ‖P_k‖_F)`.
pub const DARE_TOLERANCE: f64 = 1e-10;
/// Iteration cap for the Riccati value recursion.
pub const DARE_MAX_ITER: usize = 100_000;

/// Stabilizing solution of the DARE together with its LQR gain.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p_lqr: DMatrix<f64>,
    /// `K = −(R + BᵀPB)⁻¹ BᵀPA`, so that `u = K x`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub closed_loop_radius: f64,
}

impl DareSolution {
    /// Frobenius norm of `P − (Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA)`.
    pub fn residual(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> f64 {
        match riccati_map(a, b, q, r, &self.p_lqr) {
            Ok((next, _)) => (&self.p_lqr - next).norm(),
            Err(_) => f64::INFINITY,
        }
    }
}

// One step of the Riccati value recursion, returning the new P and the gain
// computed from the old one.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), NumericsError> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or(NumericsError::NotPositiveDefinite("R + BᵀPB"))?;
    let k = -chol.solve(&(b.transpose() * &pa));
    // Q + AᵀPA + AᵀPB K
    let next = q + a.transpose() * &pa + a.transpose() * pb * &k;
    Ok((symmetrize(&next), k))
}

/// Solves `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` by fixed-point iteration of
/// the Riccati value recursion started from `P = Q`.
///
/// The caller is responsible for stabilizability of `(A, B)` and
/// detectability of `(A, Q^{1/2})`; failure to converge or a
/// non-stabilizing limit is reported as an error.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution, NumericsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_dare: A",
            expected: (n, n),
            found: a.shape(),
        });
    }
    if b.nrows() != n {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_dare: B",
            expected: (n, b.ncols()),
            found: b.shape(),
        });
    }
    if q.shape() != (n, n) {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_dare: Q",
            expected: (n, n),
            found: q.shape(),
        });
    }
    let m = b.ncols();
    if r.shape() != (m, m) {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_dare: R",
            expected: (m, m),
            found: r.shape(),
        });
    }

    let mut p = symmetrize(q);
    let mut converged_at = None;
    for it in 1..=DARE_MAX_ITER {
        let (next, _) = riccati_map(a, b, q, r, &p)?;
        let change = (&next - &p).norm() / (1.0 + p.norm());
        p = next;
        if !change.is_finite() {
            break;
        }
        if change <= DARE_TOLERANCE {
            converged_at = Some(it);
            break;
        }
    }
    let iterations = converged_at.ok_or(NumericsError::DareNotConverged {
        iterations: DARE_MAX_ITER,
    })?;
    let (_, k) = riccati_map(a, b, q, r, &p)?;
    let closed_loop_radius = spectral_radius(&(a + b * &k));
    if !(closed_loop_radius < 1.0) {
        return Err(NumericsError::DareNotStabilizing {
            spectral_radius: closed_loop_radius,
        });
    }
    Ok(DareSolution {
        p_lqr: p,
        k,
        iterations,
        closed_loop_radius,
    })
}
