//! Chance constraints: risk splitting, deterministic tightening, the
//! condensed nominal-input QP and iterative risk allocation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::qp::{solve_qp, QpError, QpProblem};
use crate::numerics::{cdfn, icdfn, NumericsError};
use crate::plant::LtiModel;

/// Lower clamp on updated risks so that the quantile stays finite.
pub const RISK_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChanceError {
    #[error("invalid constraint specification: {0}")]
    InvalidSpec(String),
    #[error("nominal-input problem is infeasible")]
    Infeasible,
    #[error("risk allocation did not settle within {iterations} iterations")]
    MaxOuterIter {
        iterations: usize,
        last: Box<IraOutcome>,
    },
    #[error(transparent)]
    Qp(QpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<QpError> for ChanceError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible => ChanceError::Infeasible,
            other => ChanceError::Qp(other),
        }
    }
}

/// Polytopic constraints `E^u u ≤ f^u`, `E^y y ≤ f^y`, each to be met with
/// probability at least `1 − p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeSpec {
    pub e_u: DMatrix<f64>,
    pub f_u: DVector<f64>,
    pub e_y: DMatrix<f64>,
    pub f_y: DVector<f64>,
    pub p_u: f64,
    pub p_y: f64,
}

impl PolytopeSpec {
    pub fn new(
        e_u: DMatrix<f64>,
        f_u: DVector<f64>,
        e_y: DMatrix<f64>,
        f_y: DVector<f64>,
        p_u: f64,
        p_y: f64,
    ) -> Result<Self, ChanceError> {
        if e_u.nrows() != f_u.len() || e_u.nrows() == 0 {
            return Err(ChanceError::InvalidSpec(format!(
                "E_u has {} rows but f_u has {} entries",
                e_u.nrows(),
                f_u.len()
            )));
        }
        if e_y.nrows() != f_y.len() || e_y.nrows() == 0 {
            return Err(ChanceError::InvalidSpec(format!(
                "E_y has {} rows but f_y has {} entries",
                e_y.nrows(),
                f_y.len()
            )));
        }
        for (name, p) in [("p_u", p_u), ("p_y", p_y)] {
            if !(p > 0.0 && p <= 0.5) {
                return Err(ChanceError::InvalidSpec(format!(
                    "{name} = {p} outside (0, 1/2]"
                )));
            }
        }
        let finite = e_u
            .iter()
            .chain(f_u.iter())
            .chain(e_y.iter())
            .chain(f_y.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(ChanceError::InvalidSpec(
                "non-finite constraint data".into(),
            ));
        }
        Ok(Self {
            e_u,
            f_u,
            e_y,
            f_y,
            p_u,
            p_y,
        })
    }

    /// Symmetric boxes `|u_j| ≤ u_max`, `|y_j| ≤ y_max`.
    pub fn boxes(
        m: usize,
        p: usize,
        u_max: f64,
        y_max: f64,
        p_u: f64,
        p_y: f64,
    ) -> Result<Self, ChanceError> {
        let pm = |d: usize| {
            let eye = DMatrix::<f64>::identity(d, d);
            crate::numerics::linalg::vstack(&[&eye, &(-&eye)])
        };
        Self::new(
            pm(m),
            DVector::from_element(2 * m, u_max),
            pm(p),
            DVector::from_element(2 * p, y_max),
            p_u,
            p_y,
        )
    }

    pub fn q_u(&self) -> usize {
        self.f_u.len()
    }

    pub fn q_y(&self) -> usize {
        self.f_y.len()
    }
}

/// Per-row, per-step violation probabilities; columns are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskAllocation {
    pub p_u: DMatrix<f64>,
    pub p_y: DMatrix<f64>,
}

impl RiskAllocation {
    pub fn horizon(&self) -> usize {
        self.p_u.ncols()
    }

    /// Largest deviation of a column sum from its budget.
    pub fn budget_error(&self, spec: &PolytopeSpec) -> f64 {
        let col_err = |m: &DMatrix<f64>, budget: f64| {
            (0..m.ncols())
                .map(|t| (m.column(t).sum() - budget).abs())
                .fold(0.0, f64::max)
        };
        col_err(&self.p_u, spec.p_u).max(col_err(&self.p_y, spec.p_y))
    }
}

/// Every input row gets `p_u / q_u`, every output row `p_y / q_y`.
pub fn uniform_allocation(spec: &PolytopeSpec, horizon: usize) -> RiskAllocation {
    RiskAllocation {
        p_u: DMatrix::from_element(spec.q_u(), horizon, spec.p_u / spec.q_u() as f64),
        p_y: DMatrix::from_element(spec.q_y(), horizon, spec.p_y / spec.q_y() as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Input,
    Output,
}

/// One tightened row `eᵀ z^nom_t ≤ f + sqrt(eᵀΣe)·icdfn(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TightenedRow {
    pub kind: RowKind,
    pub row: usize,
    pub step: usize,
    pub f: f64,
    /// `sqrt(eᵀ Σ_t e)`.
    pub std_dev: f64,
    /// `std_dev · icdfn(p)`, non-positive for `p ≤ ½`.
    pub margin: f64,
}

impl TightenedRow {
    pub fn bound(&self) -> f64 {
        self.f + self.margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedConstraints {
    /// Ordered by step, inputs before outputs, then by row.
    pub rows: Vec<TightenedRow>,
}

fn row_std(e: DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    e.dot(&(sigma * &e)).max(0.0).sqrt()
}

/// Deterministic tightening of every `(row, step)` pair.
pub fn tighten(
    spec: &PolytopeSpec,
    alloc: &RiskAllocation,
    sigma_u: &[DMatrix<f64>],
    sigma_y: &[DMatrix<f64>],
) -> Result<TightenedConstraints, ChanceError> {
    let horizon = alloc.horizon();
    if sigma_u.len() < horizon || sigma_y.len() < horizon {
        return Err(ChanceError::InvalidSpec(
            "variance schedule shorter than horizon".into(),
        ));
    }
    let mut rows = Vec::with_capacity(horizon * (spec.q_u() + spec.q_y()));
    for t in 0..horizon {
        for i in 0..spec.q_u() {
            let std_dev = row_std(spec.e_u.row(i).transpose(), &sigma_u[t]);
            rows.push(TightenedRow {
                kind: RowKind::Input,
                row: i,
                step: t,
                f: spec.f_u[i],
                std_dev,
                margin: margin(std_dev, alloc.p_u[(i, t)])?,
            });
        }
        for i in 0..spec.q_y() {
            let std_dev = row_std(spec.e_y.row(i).transpose(), &sigma_y[t]);
            rows.push(TightenedRow {
                kind: RowKind::Output,
                row: i,
                step: t,
                f: spec.f_y[i],
                std_dev,
                margin: margin(std_dev, alloc.p_y[(i, t)])?,
            });
        }
    }
    Ok(TightenedConstraints { rows })
}

fn margin(std_dev: f64, p: f64) -> Result<f64, ChanceError> {
    let z = icdfn(p)?;
    Ok(if std_dev == 0.0 { 0.0 } else { std_dev * z })
}

/// The nominal-input problem over `u^nom = col(u^nom_0, …, u^nom_{N−1})`
/// with the nominal states condensed out.
///
/// Each constraint row is affine in the decision, `eᵀz^nom_t = g·u + offset`,
/// so a new risk allocation only changes the right-hand side.
#[derive(Debug, Clone)]
pub struct NominalProblem {
    pub spec: PolytopeSpec,
    pub horizon: usize,
    pub m: usize,
    pub p: usize,
    /// `½uᵀHu + fᵀu + cost_offset` equals the stage-cost sum.
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub cost_offset: f64,
    /// `y^nom = y_free + y_map·u`, stacked over the horizon.
    pub y_free: DVector<f64>,
    pub y_map: DMatrix<f64>,
    pub sigma_u: Vec<DMatrix<f64>>,
    pub sigma_y: Vec<DMatrix<f64>>,
    /// Row maps in the order of [`tighten`].
    pub g: DMatrix<f64>,
    pub offset: DVector<f64>,
}

/// Stage-cost weights and reference over one horizon.
#[derive(Debug, Clone)]
pub struct TrackingCost<'a> {
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub refs: &'a [DVector<f64>],
}

/// Condenses `x^nom_{t+1} = A x^nom_t + B u^nom_t`, `x^nom_0 = mean`,
/// `y^nom_t = C x^nom_t` into a QP over the nominal inputs.
pub fn build_nominal_problem(
    model: &LtiModel,
    mean: &DVector<f64>,
    spec: &PolytopeSpec,
    cost: &TrackingCost<'_>,
    sigma_u: &[DMatrix<f64>],
    sigma_y: &[DMatrix<f64>],
    horizon: usize,
) -> Result<NominalProblem, ChanceError> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    if mean.len() != n {
        return Err(ChanceError::InvalidSpec(format!(
            "mean has {} entries, state has {n}",
            mean.len()
        )));
    }
    // Markov parameters C A^j B and free response C A^t μ.
    let mut markov = Vec::with_capacity(horizon);
    let mut ab = model.b.clone();
    for _ in 0..horizon {
        markov.push(&model.c * &ab);
        ab = &model.a * ab;
    }
    let mut y_free = DVector::zeros(p * horizon);
    let mut x = mean.clone();
    for t in 0..horizon {
        y_free.rows_mut(t * p, p).copy_from(&(&model.c * &x));
        x = &model.a * x;
    }
    let mut y_map = DMatrix::zeros(p * horizon, m * horizon);
    for t in 1..horizon {
        for j in 0..t {
            y_map
                .view_mut((t * p, j * m), (p, m))
                .copy_from(&markov[t - 1 - j]);
        }
    }

    NominalProblem::from_prediction(spec, cost, y_free, y_map, sigma_u, sigma_y, m, p, horizon)
}

impl NominalProblem {
    /// Builds the QP from an affine output prediction
    /// `y_{[k,k+N)} = y_free + y_map · u_{[k,k+N)}`.
    ///
    /// Deterministic predictive controllers reuse this with zero variances,
    /// in which case every tightening margin vanishes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_prediction(
        spec: &PolytopeSpec,
        cost: &TrackingCost<'_>,
        y_free: DVector<f64>,
        y_map: DMatrix<f64>,
        sigma_u: &[DMatrix<f64>],
        sigma_y: &[DMatrix<f64>],
        m: usize,
        p: usize,
        horizon: usize,
    ) -> Result<Self, ChanceError> {
        if spec.e_u.ncols() != m || spec.e_y.ncols() != p {
            return Err(ChanceError::InvalidSpec(
                "constraint matrices do not match model dimensions".into(),
            ));
        }
        if cost.q.shape() != (p, p) || cost.r.shape() != (m, m) {
            return Err(ChanceError::InvalidSpec(
                "cost weights do not match model dimensions".into(),
            ));
        }
        if cost.refs.len() < horizon || cost.refs.iter().take(horizon).any(|r| r.len() != p) {
            return Err(ChanceError::InvalidSpec(
                "reference must cover the horizon".into(),
            ));
        }
        if sigma_u.len() < horizon || sigma_y.len() < horizon {
            return Err(ChanceError::InvalidSpec(
                "variance schedule shorter than horizon".into(),
            ));
        }
        if y_free.len() != p * horizon || y_map.shape() != (p * horizon, m * horizon) {
            return Err(ChanceError::InvalidSpec(
                "prediction map does not match the horizon".into(),
            ));
        }
        let mut q_bar = DMatrix::zeros(p * horizon, p * horizon);
        let mut r_bar = DMatrix::zeros(m * horizon, m * horizon);
        let mut r_stack = DVector::zeros(p * horizon);
        for t in 0..horizon {
            q_bar.view_mut((t * p, t * p), (p, p)).copy_from(cost.q);
            r_bar.view_mut((t * m, t * m), (m, m)).copy_from(cost.r);
            r_stack.rows_mut(t * p, p).copy_from(&cost.refs[t]);
        }
        let resid = &y_free - &r_stack;
        let qm = &q_bar * &y_map;
        let hessian =
            crate::numerics::linalg::symmetrize(&((y_map.transpose() * &qm + &r_bar) * 2.0));
        let linear = qm.transpose() * &resid * 2.0;
        let cost_offset = resid.dot(&(&q_bar * &resid));

        let rows_per_step = spec.q_u() + spec.q_y();
        let mut g = DMatrix::zeros(rows_per_step * horizon, m * horizon);
        let mut offset = DVector::zeros(rows_per_step * horizon);
        for t in 0..horizon {
            let base = t * rows_per_step;
            for i in 0..spec.q_u() {
                g.view_mut((base + i, t * m), (1, m))
                    .copy_from(&spec.e_u.row(i));
            }
            for i in 0..spec.q_y() {
                let r = base + spec.q_u() + i;
                let e = spec.e_y.row(i);
                g.row_mut(r).copy_from(&(e * y_map.rows(t * p, p)));
                offset[r] = (e * y_free.rows(t * p, p))[(0, 0)];
            }
        }

        Ok(NominalProblem {
            spec: spec.clone(),
            horizon,
            m,
            p,
            hessian,
            linear,
            cost_offset,
            y_free,
            y_map,
            sigma_u: sigma_u[..horizon].to_vec(),
            sigma_y: sigma_y[..horizon].to_vec(),
            g,
            offset,
        })
    }
}

/// Solution of the nominal problem for one fixed allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalSolution {
    pub u_nom: DVector<f64>,
    pub cost: f64,
    /// `bound − eᵀz^nom` per row.
    pub slack: DVector<f64>,
    pub tightened: TightenedConstraints,
}

impl NominalProblem {
    pub fn y_nom(&self, u_nom: &DVector<f64>) -> DVector<f64> {
        &self.y_free + &self.y_map * u_nom
    }

    pub fn cost(&self, u_nom: &DVector<f64>) -> f64 {
        0.5 * u_nom.dot(&(&self.hessian * u_nom)) + self.linear.dot(u_nom) + self.cost_offset
    }

    /// Solves the QP with the tightening implied by `alloc`.
    pub fn solve(&self, alloc: &RiskAllocation) -> Result<NominalSolution, ChanceError> {
        let tightened = tighten(&self.spec, alloc, &self.sigma_u, &self.sigma_y)?;
        let bounds = DVector::from_iterator(
            tightened.rows.len(),
            tightened.rows.iter().map(|r| r.bound()),
        );
        let h = &bounds - &self.offset;

        // Rows that do not depend on the decision are checked directly.
        let mut keep = Vec::new();
        for (k, row) in self.g.row_iter().enumerate() {
            if row.amax() > 0.0 {
                keep.push(k);
            } else if h[k] < -1e-9 * (1.0 + bounds[k].abs()) {
                return Err(ChanceError::Infeasible);
            }
        }
        let nu = self.m * self.horizon;
        let g_keep = DMatrix::from_fn(keep.len(), nu, |r, c| self.g[(keep[r], c)]);
        let h_keep = DVector::from_fn(keep.len(), |r, _| h[keep[r]]);
        let qp = QpProblem::new(self.hessian.clone(), self.linear.clone(), g_keep, h_keep)?;
        let sol = solve_qp(&qp)?;
        let u_nom = sol.x;
        let slack = h - &self.g * &u_nom;
        Ok(NominalSolution {
            cost: self.cost(&u_nom),
            u_nom,
            slack,
            tightened,
        })
    }

    /// Nominal value `eᵀz^nom_t` of every constraint row.
    pub fn row_values(&self, u_nom: &DVector<f64>) -> DVector<f64> {
        &self.g * u_nom + &self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IraSettings {
    pub alpha: f64,
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for IraSettings {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            epsilon: 1e-6,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IraOutcome {
    pub u_nom: DVector<f64>,
    pub allocation: RiskAllocation,
    pub cost: f64,
    pub iterations: usize,
    /// Optimal cost of each solved QP.
    pub cost_history: Vec<f64>,
    /// Allocation used for each solved QP.
    pub allocation_history: Vec<RiskAllocation>,
}

/// Row activity: slack within `1e-7·(1 + |f|)` of zero.
fn is_active(slack: f64, f: f64) -> bool {
    slack <= 1e-7 * (1.0 + f.abs())
}

/// Alternates QP solves and risk reallocation until the cost settles or
/// every step has all or none of its rows active.
pub fn iterative_risk_allocation(
    problem: &NominalProblem,
    settings: &IraSettings,
) -> Result<IraOutcome, ChanceError> {
    if !(settings.alpha > 0.0 && settings.alpha < 1.0) || !(settings.epsilon > 0.0) {
        return Err(ChanceError::InvalidSpec(
            "IRA needs alpha in (0, 1) and epsilon > 0".into(),
        ));
    }
    let spec = &problem.spec;
    let (qu, qy) = (spec.q_u(), spec.q_y());
    let per_step = qu + qy;
    let mut alloc = uniform_allocation(spec, problem.horizon);
    let mut prev_cost = f64::INFINITY;
    let mut cost_history = Vec::new();
    let mut allocation_history = Vec::new();

    for iter in 1..=settings.max_iter.max(1) {
        let sol = problem.solve(&alloc)?;
        cost_history.push(sol.cost);
        allocation_history.push(alloc.clone());
        let outcome = |alloc: RiskAllocation,
                       cost_history: Vec<f64>,
                       allocation_history: Vec<RiskAllocation>| IraOutcome {
            u_nom: sol.u_nom.clone(),
            allocation: alloc,
            cost: sol.cost,
            iterations: iter,
            cost_history,
            allocation_history,
        };
        if (prev_cost - sol.cost).abs() <= settings.epsilon {
            return Ok(outcome(alloc, cost_history, allocation_history));
        }
        prev_cost = sol.cost;

        let values = problem.row_values(&sol.u_nom);
        let active: Vec<bool> = sol
            .tightened
            .rows
            .iter()
            .enumerate()
            .map(|(k, row)| is_active(sol.slack[k], row.f))
            .collect();
        let settled = (0..problem.horizon).all(|t| {
            let base = t * per_step;
            let au = active[base..base + qu].iter().filter(|&&a| a).count();
            let ay = active[base + qu..base + per_step]
                .iter()
                .filter(|&&a| a)
                .count();
            (au == 0 || au == qu) && (ay == 0 || ay == qy)
        });
        if settled {
            return Ok(outcome(alloc, cost_history, allocation_history));
        }
        if iter == settings.max_iter {
            let last = outcome(alloc, cost_history, allocation_history);
            return Err(ChanceError::MaxOuterIter {
                iterations: iter,
                last: Box::new(last),
            });
        }

        for t in 0..problem.horizon {
            let base = t * per_step;
            update_group(
                &mut alloc.p_u,
                t,
                spec.p_u,
                settings.alpha,
                &active[base..base + qu],
                &sol.tightened.rows[base..base + qu],
                &values.as_slice()[base..base + qu],
            );
            update_group(
                &mut alloc.p_y,
                t,
                spec.p_y,
                settings.alpha,
                &active[base + qu..base + per_step],
                &sol.tightened.rows[base + qu..base + per_step],
                &values.as_slice()[base + qu..base + per_step],
            );
        }
    }
    unreachable!("loop returns on its final iteration")
}

// Shrinks inactive risks toward their actual tail probability and hands
// the released budget to the active rows in equal parts.
fn update_group(
    p: &mut DMatrix<f64>,
    t: usize,
    budget: f64,
    alpha: f64,
    active: &[bool],
    rows: &[TightenedRow],
    values: &[f64],
) {
    let q = active.len();
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 || n_active == q {
        return;
    }
    for i in 0..q {
        if active[i] {
            continue;
        }
        let tail = if rows[i].std_dev > 0.0 {
            1.0 - cdfn((rows[i].f - values[i]) / rows[i].std_dev)
        } else if values[i] > rows[i].f {
            1.0
        } else {
            0.0
        };
        p[(i, t)] = (alpha * p[(i, t)] + (1.0 - alpha) * tail).max(RISK_FLOOR);
    }
    let residual = budget - p.column(t).sum();
    let share = residual / n_active as f64;
    for i in 0..q {
        if active[i] {
            p[(i, t)] += share;
        }
    }
}
