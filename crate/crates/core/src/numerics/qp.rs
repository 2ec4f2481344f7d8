//! Dense convex QP solver.
//!
//! Solves `minimize ½xᵀHx + fᵀx  s.t.  G x ≤ h,  A_eq x = b_eq` with an
//! operator-splitting (ADMM) iteration on a Ruiz-equilibrated copy of the
//! problem, followed by an active-set polish that solves the KKT system of
//! the identified active constraints exactly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::linalg::symmetrize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("qp is primal infeasible")]
    Infeasible,
    #[error("qp solver hit the iteration cap ({iterations})")]
    MaxIter { iterations: usize },
    #[error("qp dimensions inconsistent: {0}")]
    Dimension(String),
    #[error("qp data not finite")]
    NonFinite,
    #[error("qp cost matrix is not symmetric")]
    Asymmetric,
}

/// `minimize ½xᵀHx + fᵀx  s.t.  G x ≤ h,  A_eq x = b_eq`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g_ineq: DMatrix<f64>,
        h_ineq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        let qp = Self {
            h,
            f,
            g_ineq,
            h_ineq,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Problem without inequality constraints.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn with_equalities(
        mut self,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self, QpError> {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        if self.h.shape() != (n, n) {
            return Err(QpError::Dimension(format!(
                "H is {:?}, expected {n}×{n}",
                self.h.shape()
            )));
        }
        if self.g_ineq.ncols() != n || self.g_ineq.nrows() != self.h_ineq.len() {
            return Err(QpError::Dimension(format!(
                "G is {:?} with {} bounds",
                self.g_ineq.shape(),
                self.h_ineq.len()
            )));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension(format!(
                "A_eq is {:?} with {} right-hand sides",
                self.a_eq.shape(),
                self.b_eq.len()
            )));
        }
        let finite = self
            .h
            .iter()
            .chain(self.f.iter())
            .chain(self.g_ineq.iter())
            .chain(self.h_ineq.iter())
            .chain(self.a_eq.iter())
            .chain(self.b_eq.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        let scale = self.h.amax().max(f64::MIN_POSITIVE);
        if (&self.h - self.h.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::Asymmetric);
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest violation of `G x ≤ h` and `A_eq x = b_eq` (zero if feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.g_ineq * x - &self.h_ineq)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        ineq.max(eq)
    }

    /// KKT residuals of a primal-dual pair.
    pub fn kkt(&self, sol: &QpSolution) -> KktResiduals {
        let x = &sol.x;
        let grad = &self.h * x
            + &self.f
            + self.g_ineq.transpose() * &sol.y_ineq
            + self.a_eq.transpose() * &sol.y_eq;
        let slack = &self.h_ineq - &self.g_ineq * x;
        let complementarity = slack
            .iter()
            .zip(sol.y_ineq.iter())
            .map(|(s, y)| (s * y).abs())
            .fold(0.0, f64::max);
        KktResiduals {
            stationarity: grad.amax(),
            primal: self.max_violation(x),
            dual: sol.y_ineq.iter().map(|y| (-y).max(0.0)).fold(0.0, f64::max),
            complementarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-9,
            eps_rel: 1e-9,
            eps_infeasible: 1e-7,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 15,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `G x ≤ h` (non-negative at optimality).
    pub y_ineq: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// Solves the QP with default settings.
pub fn solve_qp(qp: &QpProblem) -> Result<QpSolution, QpError> {
    solve_qp_with(qp, &QpSettings::default())
}

pub fn solve_qp_with(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let m_in = qp.h_ineq.len();
    let m_eq = qp.b_eq.len();
    let m = m_in + m_eq;

    if m == 0 {
        let x = solve_unconstrained(qp)?;
        return Ok(QpSolution {
            objective: qp.objective(&x),
            x,
            y_ineq: DVector::zeros(0),
            y_eq: DVector::zeros(0),
            iterations: 0,
            polished: true,
        });
    }

    let a = stack_rows(&qp.g_ineq, &qp.a_eq);
    let mut lower = DVector::from_element(m, f64::NEG_INFINITY);
    let mut upper = DVector::zeros(m);
    upper.rows_mut(0, m_in).copy_from(&qp.h_ineq);
    upper.rows_mut(m_in, m_eq).copy_from(&qp.b_eq);
    lower.rows_mut(m_in, m_eq).copy_from(&qp.b_eq);

    let scaled = Scaling::ruiz(&qp.h, &qp.f, &a, settings.scaling_iters);
    let admm = admm(&scaled, &lower, &upper, m_in, settings)?;

    // Unscale: x = D x̄, y = E ȳ / c.
    let x = scaled.d.component_mul(&admm.x);
    let y = scaled.e.component_mul(&admm.y) / scaled.c;
    let mut sol = QpSolution {
        objective: qp.objective(&x),
        y_ineq: y.rows(0, m_in).into_owned(),
        y_eq: y.rows(m_in, m_eq).into_owned(),
        x,
        iterations: admm.iterations,
        polished: false,
    };

    if settings.polish {
        if let Some(polished) = polish(qp, &sol) {
            let before = qp.kkt(&sol).max();
            let after = qp.kkt(&polished).max();
            if after <= before || after < 1e-9 {
                sol = QpSolution {
                    iterations: sol.iterations,
                    ..polished
                };
            }
        }
    }
    if !admm.converged && !sol.polished {
        return Err(QpError::MaxIter {
            iterations: sol.iterations,
        });
    }
    Ok(sol)
}

fn solve_unconstrained(qp: &QpProblem) -> Result<DVector<f64>, QpError> {
    let neg_f = -&qp.f;
    if let Some(chol) = symmetrize(&qp.h).cholesky() {
        return Ok(chol.solve(&neg_f));
    }
    // Singular but consistent: least-norm stationary point.
    let x = super::linalg::pinv(&qp.h) * &neg_f;
    if (&qp.h * &x + &qp.f).amax() > 1e-9 * (1.0 + qp.f.amax()) {
        return Err(QpError::MaxIter { iterations: 0 });
    }
    Ok(x)
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(
        top.nrows() + bottom.nrows(),
        top.ncols().max(bottom.ncols()),
    );
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape())
        .copy_from(bottom);
    out
}

struct Scaling {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

impl Scaling {
    // Modified Ruiz equilibration of [P Aᵀ; A 0] followed by cost scaling.
    fn ruiz(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, iters: usize) -> Self {
        let n = p.nrows();
        let m = a.nrows();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut ps = p.clone();
        let mut as_ = a.clone();
        let mut qs = q.clone();
        let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
        for _ in 0..iters {
            let mut dd = DVector::zeros(n);
            for j in 0..n {
                let col_p = ps.column(j).amax();
                let col_a = if m > 0 { as_.column(j).amax() } else { 0.0 };
                dd[j] = 1.0 / clamp(col_p.max(col_a)).sqrt();
            }
            let mut ee = DVector::zeros(m);
            for i in 0..m {
                ee[i] = 1.0 / clamp(as_.row(i).amax()).sqrt();
            }
            for j in 0..n {
                for i in 0..n {
                    ps[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    as_[(i, j)] *= ee[i] * dd[j];
                }
            }
            qs.component_mul_assign(&dd);
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n as f64
        } else {
            1.0
        };
        let c = 1.0 / clamp(mean_col.max(qs.amax()));
        ps *= c;
        qs *= c;
        Self {
            p: ps,
            q: qs,
            a: as_,
            d,
            e,
            c,
        }
    }
}

struct AdmmOutput {
    x: DVector<f64>,
    y: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn admm(
    s: &Scaling,
    lower_raw: &DVector<f64>,
    upper_raw: &DVector<f64>,
    m_in: usize,
    settings: &QpSettings,
) -> Result<AdmmOutput, QpError> {
    let n = s.p.nrows();
    let m = s.a.nrows();
    let lower = lower_raw.component_mul(&s.e);
    let upper = upper_raw.component_mul(&s.e);
    let is_eq: Vec<bool> = (0..m).map(|i| i >= m_in).collect();

    let mut rho_bar = settings.rho;
    let rho_vec = |rb: f64| DVector::from_fn(m, |i, _| if is_eq[i] { 1e3 * rb } else { rb });
    let mut rho = rho_vec(rho_bar);
    let at = s.a.transpose();
    let factor = |rho: &DVector<f64>| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, QpError> {
        let mut k = s.p.clone();
        for i in 0..n {
            k[(i, i)] += settings.sigma;
        }
        let mut ra = s.a.clone();
        for i in 0..m {
            ra.row_mut(i).scale_mut(rho[i]);
        }
        k += &at * ra;
        symmetrize(&k)
            .cholesky()
            .ok_or_else(|| QpError::Dimension("admm linear system not positive definite".into()))
    };
    let mut chol = factor(&rho)?;

    let d_inv = s.d.map(|v| 1.0 / v);
    let e_inv = s.e.map(|v| 1.0 / v);

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let alpha = settings.alpha;
    let check_every = 10;

    for it in 1..=settings.max_iter {
        let y_prev = y.clone();
        let rhs = &x * settings.sigma - &s.q + &at * (rho.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        x = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relax = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_next = DVector::from_fn(m, |i, _| {
            (z_relax[i] + y[i] / rho[i]).clamp(lower[i], upper[i])
        });
        y += rho.component_mul(&(&z_relax - &z_next));
        z = z_next;

        if it % check_every != 0 && it != settings.max_iter {
            continue;
        }

        // Residuals in the original (unscaled) problem.
        let ax = &s.a * &x;
        let px = &s.p * &x;
        let aty = &at * &y;
        let prim = e_inv.component_mul(&(&ax - &z)).amax();
        let dual = d_inv.component_mul(&(&px + &s.q + &aty)).amax() / s.c;
        let ax_norm = e_inv.component_mul(&ax).amax();
        let z_norm = e_inv.component_mul(&z).amax();
        let eps_prim = settings.eps_abs + settings.eps_rel * ax_norm.max(z_norm);
        let px_norm = d_inv.component_mul(&px).amax() / s.c;
        let aty_norm = d_inv.component_mul(&aty).amax() / s.c;
        let q_norm = d_inv.component_mul(&s.q).amax() / s.c;
        let eps_dual = settings.eps_abs + settings.eps_rel * px_norm.max(aty_norm).max(q_norm);
        if prim <= eps_prim && dual <= eps_dual {
            return Ok(AdmmOutput {
                x,
                y,
                iterations: it,
                converged: true,
            });
        }

        // Primal infeasibility certificate from the multiplier increment.
        let dy = &y - &y_prev;
        let dy_norm = s.e.component_mul(&dy).amax();
        if dy_norm > 1e-30 {
            let at_dy = d_inv.component_mul(&(&at * &dy)).amax();
            let mut support = 0.0;
            let mut unbounded = false;
            for i in 0..m {
                if dy[i] > 0.0 {
                    if upper[i].is_finite() {
                        support += upper[i] * dy[i];
                    } else if dy[i] > settings.eps_infeasible * dy_norm {
                        unbounded = true;
                    }
                } else if dy[i] < 0.0 {
                    if lower[i].is_finite() {
                        support += lower[i] * dy[i];
                    } else if -dy[i] > settings.eps_infeasible * dy_norm {
                        unbounded = true;
                    }
                }
            }
            if !unbounded
                && at_dy <= settings.eps_infeasible * dy_norm
                && support <= -settings.eps_infeasible * dy_norm
            {
                return Err(QpError::Infeasible);
            }
        }

        // Step-size adaptation.
        if it % 50 == 0 {
            let prim_ratio =
                e_inv.component_mul(&(&ax - &z)).amax() / ax_norm.max(z_norm).max(1e-30);
            let dual_ratio = d_inv.component_mul(&(&px + &s.q + &aty)).amax()
                / d_inv
                    .component_mul(&px)
                    .amax()
                    .max(d_inv.component_mul(&aty).amax())
                    .max(d_inv.component_mul(&s.q).amax())
                    .max(1e-30);
            let proposal = (rho_bar * (prim_ratio / dual_ratio.max(1e-30)).sqrt()).clamp(1e-6, 1e6);
            if proposal > 5.0 * rho_bar || proposal < 0.2 * rho_bar {
                rho_bar = proposal;
                rho = rho_vec(rho_bar);
                chol = factor(&rho)?;
            }
        }
    }
    Ok(AdmmOutput {
        x,
        y,
        iterations: settings.max_iter,
        converged: false,
    })
}

// Primal-dual active-set refinement starting from the ADMM multipliers.
fn polish(qp: &QpProblem, start: &QpSolution) -> Option<QpSolution> {
    let m_in = qp.h_ineq.len();
    let y_scale = start.y_ineq.amax().max(1.0);
    let mut active: Vec<bool> = (0..m_in)
        .map(|i| {
            let slack = qp.h_ineq[i] - qp.g_ineq.row(i).dot(&start.x.transpose());
            start.y_ineq[i] > 1e-7 * y_scale
                || slack.abs() <= 1e-9 * (1.0 + qp.h_ineq[i].abs()) && start.y_ineq[i] > 0.0
        })
        .collect();

    for _ in 0..(2 * m_in + 10) {
        let (x, y_act, y_eq) = solve_kkt(qp, &active)?;
        let mut y_ineq = DVector::zeros(m_in);
        let mut k = 0;
        for i in 0..m_in {
            if active[i] {
                y_ineq[i] = y_act[k];
                k += 1;
            }
        }
        // Most negative multiplier among active rows.
        let mut worst_dual = (None, -1e-12 * y_scale);
        for i in 0..m_in {
            if active[i] && y_ineq[i] < worst_dual.1 {
                worst_dual = (Some(i), y_ineq[i]);
            }
        }
        if let (Some(i), _) = worst_dual {
            active[i] = false;
            continue;
        }
        // Most violated inactive row.
        let mut worst_primal = (None, 0.0);
        for i in 0..m_in {
            if !active[i] {
                let viol = qp.g_ineq.row(i).dot(&x.transpose()) - qp.h_ineq[i];
                if viol > 1e-11 * (1.0 + qp.h_ineq[i].abs()) && viol > worst_primal.1 {
                    worst_primal = (Some(i), viol);
                }
            }
        }
        if let (Some(i), _) = worst_primal {
            active[i] = true;
            continue;
        }
        let y_ineq = y_ineq.map(|v| v.max(0.0));
        return Some(QpSolution {
            objective: qp.objective(&x),
            x,
            y_ineq,
            y_eq,
            iterations: 0,
            polished: true,
        });
    }
    None
}

// Solves the equality-constrained KKT system for the given working set,
// with two rounds of iterative refinement.
fn solve_kkt(
    qp: &QpProblem,
    active: &[bool],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.dim();
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let na = rows.len();
    let ne = qp.b_eq.len();
    let dim = n + na + ne;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.f));
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..n {
            let g = qp.g_ineq[(i, j)];
            kkt[(n + k, j)] = g;
            kkt[(j, n + k)] = g;
        }
        rhs[n + k] = qp.h_ineq[i];
    }
    for e in 0..ne {
        for j in 0..n {
            let a = qp.a_eq[(e, j)];
            kkt[(n + na + e, j)] = a;
            kkt[(j, n + na + e)] = a;
        }
        rhs[n + na + e] = qp.b_eq[e];
    }
    let lu = kkt.clone().full_piv_lu();
    if !lu.is_invertible() {
        return None;
    }
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..2 {
        let r = &rhs - &kkt * &sol;
        sol += lu.solve(&r)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Conditioning guard: reject numerically singular working sets.
    if (&kkt * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let y_act = sol.rows(n, na).into_owned();
    let y_eq = sol.rows(n + na, ne).into_owned();
    Some((x, y_act, y_eq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn unconstrained_minimum() {
        // (x − 2)² = x² − 4x + 4 → H = 2, f = −4.
        let qp = QpProblem::unconstrained(s(2.0), DVector::from_element(1, -4.0)).unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn active_lower_bound() {
        let qp = QpProblem::new(
            s(2.0),
            DVector::zeros(1),
            s(-1.0),
            DVector::from_element(1, -1.0),
        )
        .unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!(qp.kkt(&sol).max() < 1e-9);
        assert!((sol.y_ineq[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_feasible_set_is_infeasible() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![-1.0, -1.0]);
        let qp = QpProblem::new(s(2.0), DVector::zeros(1), g, h).unwrap();
        assert_eq!(solve_qp(&qp).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn equality_constraints() {
        // min x² + y² s.t. x + y = 1.
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DVector::from_element(1, 1.0),
            )
            .unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-10 && (sol.x[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn rejects_asymmetric_cost() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert_eq!(
            QpProblem::unconstrained(h, DVector::zeros(2)).unwrap_err(),
            QpError::Asymmetric
        );
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let n = 4;
            let m = 6;
            let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let g = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
            let hb = &g * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.3));
            let qp = QpProblem::new(symmetrize(&h), f, g.clone(), hb.clone()).unwrap();
            let sol = solve_qp(&qp).unwrap();
            assert!(qp.kkt(&sol).max() < 1e-7);
            let best = qp.objective(&sol.x);
            let mut tested = 0;
            while tested < 100 {
                let cand = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                if qp.max_violation(&cand) > 0.0 {
                    continue;
                }
                tested += 1;
                assert!(best <= qp.objective(&cand) + 1e-7);
            }
        }
    }
}
