//! Dense linear-algebra kernels shared by the estimation, data and control layers.

use nalgebra::{DMatrix, DVector};

use super::NumericsError;

/// Thin singular value decomposition `M = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Thin SVD computed by faer. nalgebra's bidiagonal iteration loses
/// accuracy on wide rank-deficient data matrices, so it is only used if
/// faer reports non-convergence.
pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let (rows, cols) = m.shape();
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    match fm.thin_svd() {
        Ok(svd) => {
            let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
            ThinSvd {
                u: DMatrix::from_fn(rows, u.ncols(), |i, j| u[(i, j)]),
                s: DVector::from_fn(s.nrows(), |i, _| s[i]),
                v: DMatrix::from_fn(cols, v.ncols(), |i, j| v[(i, j)]),
            }
        }
        Err(_) => {
            let svd = m.clone().svd(true, true);
            ThinSvd {
                u: svd.u.expect("svd computed with u"),
                s: svd.singular_values,
                v: svd.v_t.expect("svd computed with v_t").transpose(),
            }
        }
    }
}

/// Moore–Penrose pseudoinverse via SVD.
///
/// Singular values below `σ_max · max(rows, cols) · ε` are treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = thin_svd(m);
    let sigma_max = svd.s.iter().cloned().fold(0.0, f64::max);
    let tol = rank_tolerance(sigma_max, rows, cols);
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.s.iter().enumerate() {
        if s > tol {
            out += (svd.v.column(k) * svd.u.column(k).transpose()) / s;
        }
    }
    out
}

/// The rank cutoff used throughout the crate.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * rows.max(cols) as f64 * f64::EPSILON
}

/// Numerical rank under the same cutoff as [`pinv`].
pub fn rank(m: &DMatrix<f64>) -> usize {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0;
    }
    let sv = thin_svd(m).s;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = rank_tolerance(sigma_max, rows, cols);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Ridge-regression estimate `Y (WᵀW + λI)⁻¹ Wᵀ` of `Y W†`.
///
/// Evaluated through the push-through identity `Y Wᵀ (W Wᵀ + λI)⁻¹`, which
/// only needs a factorization of the (usually much smaller) row-sized Gram
/// matrix.
pub fn tikhonov_solve(
    w: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>, NumericsError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(NumericsError::InvalidArgument(format!(
            "tikhonov parameter must be positive, got {lambda}"
        )));
    }
    if y.ncols() != w.ncols() {
        return Err(NumericsError::DimensionMismatch {
            context: "tikhonov_solve",
            expected: (y.nrows(), w.ncols()),
            found: y.shape(),
        });
    }
    let rows = w.nrows();
    let gram = w * w.transpose() + DMatrix::identity(rows, rows) * lambda;
    let chol = gram.cholesky().ok_or(NumericsError::NotPositiveDefinite(
        "regularized gram matrix",
    ))?;
    // (Y Wᵀ) G⁻¹ = (G⁻¹ W Yᵀ)ᵀ since G is symmetric.
    let rhs = w * y.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// `(S + Sᵀ) / 2`.
pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `s`.
pub fn min_symmetric_eigenvalue(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    symmetrize(s)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric PSD square root factor `F` with `F Fᵀ = S`, negative
/// eigenvalues clamped at zero.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(s).symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(root);
    }
    f
}

/// Relative symmetry defect `‖S − Sᵀ‖_F / max(1, ‖S‖_F)`.
pub fn asymmetry(s: &DMatrix<f64>) -> f64 {
    (s - s.transpose()).norm() / s.norm().max(1.0)
}

/// `I_k ⊗ M`.
pub fn kron_identity(k: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(k * r, k * c);
    for i in 0..k {
        out.view_mut((i * r, i * c), (r, c)).copy_from(m);
    }
    out
}

/// Stack matrices vertically; all must share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r0, 0), b.shape()).copy_from(*b);
        r0 += b.nrows();
    }
    out
}

/// Stack matrices horizontally; all must share a row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c0), b.shape()).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

/// Concatenate vectors.
pub fn vcat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut i0 = 0;
    for p in parts {
        out.rows_mut(i0, p.len()).copy_from(*p);
        i0 += p.len();
    }
    out
}

/// Entrywise maximum of `|a − b| / max(1, |b|)`.
pub fn max_relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks that every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
