//! Deterministic receding-horizon benchmarks: model-based MPC, regularized
//! DeePC and regularized SPC. All three apply their first `N_c` planned
//! inputs open loop and enforce the constraints without tightening.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::{
    is_plan_failure, open_loop_fallback, split, to_vec, warmup_after_start, ControlStepRecord,
    Controller, ControllerError, ControllerLog, OpenLoopPlan, PlanStatus, PredictiveSetup,
    StepRecord,
};
use crate::chance::{
    build_nominal_problem, uniform_allocation, ChanceError, NominalProblem, TrackingCost,
};
use crate::datadriven::{hankel, OfflineData};
use crate::estimation::{kalman_schedule, kf_predict, kf_update, GaussianBelief};
use crate::numerics::linalg::{pinv, symmetrize, tikhonov_solve, vcat, vstack};
use crate::numerics::qp::{solve_qp, QpError, QpProblem};
use crate::plant::LtiModel;

fn zero_variances(n: usize, m: usize, p: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    (vec![DMatrix::zeros(m, m); n], vec![DMatrix::zeros(p, p); n])
}

/// Hard-constrained tracking QP for an affine output prediction.
fn solve_prediction_qp(
    setup: &PredictiveSetup,
    k: usize,
    y_free: DVector<f64>,
    y_map: DMatrix<f64>,
    m: usize,
    p: usize,
) -> Result<(Vec<DVector<f64>>, f64), ChanceError> {
    let n = setup.horizons.n;
    let refs = setup.refs.window(k, n);
    let cost = TrackingCost {
        q: &setup.q,
        r: &setup.r,
        refs: &refs,
    };
    let (su, sy) = zero_variances(n, m, p);
    let problem =
        NominalProblem::from_prediction(&setup.spec, &cost, y_free, y_map, &su, &sy, m, p, n)?;
    let sol = problem.solve(&uniform_allocation(&setup.spec, n))?;
    Ok((split(&sol.u_nom, m), sol.cost))
}

/// Keeps the most recent `L` inputs and outputs, zero-initialized (the
/// plant is taken to be at rest before `t = 0`).
#[derive(Debug, Clone)]
struct IoHistory {
    u: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
}

impl IoHistory {
    fn new(l: usize, m: usize, p: usize) -> Self {
        Self {
            u: std::iter::repeat_n(DVector::zeros(m), l).collect(),
            y: std::iter::repeat_n(DVector::zeros(p), l).collect(),
        }
    }

    fn push(&mut self, u: DVector<f64>, y: DVector<f64>) {
        self.u.pop_front();
        self.u.push_back(u);
        self.y.pop_front();
        self.y.push_back(y);
    }

    fn stacked(&self) -> (DVector<f64>, DVector<f64>) {
        let u: Vec<&DVector<f64>> = self.u.iter().collect();
        let y: Vec<&DVector<f64>> = self.y.iter().collect();
        (vcat(&u), vcat(&y))
    }
}

/// Shared open-loop execution: plan every `N_c` steps, apply the plan.
#[derive(Debug, Clone)]
struct OpenLoopRunner {
    plan: Option<OpenLoopPlan>,
    next_t: usize,
    log: ControllerLog,
}

impl OpenLoopRunner {
    fn new() -> Self {
        Self {
            plan: None,
            next_t: 0,
            log: ControllerLog::default(),
        }
    }

    fn check_order(&self, t: usize) -> Result<(), ControllerError> {
        if t != self.next_t {
            return Err(ControllerError::OutOfOrder {
                expected: self.next_t,
                got: t,
            });
        }
        Ok(())
    }

    fn observe(&mut self, t: usize) -> Result<(), ControllerError> {
        self.check_order(t)?;
        if self.plan.is_some() {
            return Err(warmup_after_start());
        }
        self.next_t += 1;
        Ok(())
    }

    fn needs_plan(&self, t: usize, n_c: usize) -> bool {
        self.plan.as_ref().is_none_or(|p| t - p.k >= n_c)
    }

    /// Installs the result of a planning attempt, falling back on failure.
    fn install(
        &mut self,
        setup: &PredictiveSetup,
        k: usize,
        m: usize,
        attempt: Result<(Vec<DVector<f64>>, f64), ChanceError>,
    ) -> Result<(), ControllerError> {
        let (plan, status, cost, note) = match attempt {
            Ok((u, cost)) => (OpenLoopPlan { k, u }, PlanStatus::Solved, Some(cost), None),
            Err(e) if is_plan_failure(&e) => {
                let (plan, status) =
                    open_loop_fallback(setup.fallback, self.plan.as_ref(), k, setup.horizons.n, m)?;
                (plan, status, None, Some(e.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        self.log.control_steps.push(ControlStepRecord {
            k,
            status,
            iterations: usize::from(status == PlanStatus::Solved),
            cost,
            u_nom: plan.u.iter().map(to_vec).collect(),
            note,
        });
        self.plan = Some(plan);
        Ok(())
    }

    fn current(&mut self, t: usize, estimate: &[f64]) -> DVector<f64> {
        let plan = self.plan.as_ref().expect("plan installed");
        let u = plan.u[t - plan.k].clone();
        self.log.steps.push(StepRecord {
            t,
            u: to_vec(&u),
            estimate: estimate.to_vec(),
        });
        self.next_t += 1;
        u
    }
}

/// Deterministic MPC on a state-space model with a Kalman state estimate.
#[derive(Debug, Clone)]
pub struct MpcController {
    model: LtiModel,
    setup: PredictiveSetup,
    xhat_prior: DVector<f64>,
    p_prior: DMatrix<f64>,
    runner: OpenLoopRunner,
}

pub fn mpc_controller(
    model: LtiModel,
    setup: PredictiveSetup,
    prior: GaussianBelief,
) -> Result<MpcController, ControllerError> {
    setup.validate(model.m(), model.p())?;
    if prior.dim() != model.n() {
        return Err(ControllerError::InvalidConfig(
            "prior does not match the model state".into(),
        ));
    }
    Ok(MpcController {
        model,
        setup,
        xhat_prior: prior.mean,
        p_prior: prior.cov,
        runner: OpenLoopRunner::new(),
    })
}

impl MpcController {
    /// The plan MPC would compute at step `k` from state estimate `mean`.
    pub fn plan_from_estimate(
        &self,
        k: usize,
        mean: &DVector<f64>,
    ) -> Result<Vec<DVector<f64>>, ControllerError> {
        self.solve(k, mean).map(|(u, _)| u).map_err(Into::into)
    }

    fn solve(
        &self,
        k: usize,
        mean: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, f64), ChanceError> {
        let n = self.setup.horizons.n;
        let (m, p) = (self.model.m(), self.model.p());
        let refs = self.setup.refs.window(k, n);
        let cost = TrackingCost {
            q: &self.setup.q,
            r: &self.setup.r,
            refs: &refs,
        };
        let (su, sy) = zero_variances(n, m, p);
        let problem =
            build_nominal_problem(&self.model, mean, &self.setup.spec, &cost, &su, &sy, n)?;
        let sol = problem.solve(&uniform_allocation(&self.setup.spec, n))?;
        Ok((split(&sol.u_nom, m), sol.cost))
    }
}

impl Controller for MpcController {
    fn name(&self) -> &str {
        "MPC"
    }

    fn act(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        self.runner.check_order(t)?;
        if self.runner.needs_plan(t, self.setup.horizons.n_c) {
            let attempt = self.solve(t, &self.xhat_prior);
            self.runner
                .install(&self.setup, t, self.model.m(), attempt)?;
        }
        let step = kalman_schedule(&self.model, &self.p_prior, 1)?;
        let xhat = kf_update(&self.xhat_prior, y, &step.gains[0], &self.model)?;
        let u = self.runner.current(t, xhat.as_slice());
        self.xhat_prior = kf_predict(&xhat, &u, &self.model)?;
        self.p_prior = step.p_prior[1].clone();
        Ok(u)
    }

    fn observe(
        &mut self,
        t: usize,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), ControllerError> {
        self.runner.observe(t)?;
        let step = kalman_schedule(&self.model, &self.p_prior, 1)?;
        let xhat = kf_update(&self.xhat_prior, y, &step.gains[0], &self.model)?;
        self.xhat_prior = kf_predict(&xhat, u, &self.model)?;
        self.p_prior = step.p_prior[1].clone();
        Ok(())
    }

    fn log(&self) -> &ControllerLog {
        &self.runner.log
    }
}

/// Depth-`(L+N)` Hankel blocks `U_p, U_f, Y_p, Y_f`.
fn past_future_blocks(
    data: &OfflineData,
    l: usize,
    n: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), ControllerError> {
    let (m, p) = (data.m(), data.p());
    let hu = hankel(&data.u, l + n)?;
    let hy = hankel(&data.y, l + n)?;
    Ok((
        hu.rows(0, m * l).into_owned(),
        hu.rows(m * l, m * n).into_owned(),
        hy.rows(0, p * l).into_owned(),
        hy.rows(p * l, p * n).into_owned(),
    ))
}

fn check_data(
    data: &OfflineData,
    setup: &PredictiveSetup,
) -> Result<(usize, usize), ControllerError> {
    let (m, p) = (data.m(), data.p());
    setup.validate(m, p)?;
    Ok((m, p))
}

/// Subspace predictive control with a ridge-regularized predictor.
#[derive(Debug, Clone)]
pub struct SpcController {
    predictor: DMatrix<f64>,
    setup: PredictiveSetup,
    m: usize,
    p: usize,
    history: IoHistory,
    runner: OpenLoopRunner,
}

/// `λ = 0` selects the plain pseudoinverse.
pub fn spc_controller(
    data: &OfflineData,
    setup: PredictiveSetup,
    lambda: f64,
) -> Result<SpcController, ControllerError> {
    let (m, p) = check_data(data, &setup)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ControllerError::InvalidConfig(format!(
            "SPC regularization must be >= 0, got {lambda}"
        )));
    }
    let (l, n) = (setup.horizons.l, setup.horizons.n);
    let (up, uf, yp, yf) = past_future_blocks(data, l, n)?;
    let w = vstack(&[&up, &yp, &uf]);
    let predictor = if lambda == 0.0 {
        &yf * pinv(&w)
    } else {
        tikhonov_solve(&w, &yf, lambda)?
    };
    Ok(SpcController {
        predictor,
        history: IoHistory::new(l, m, p),
        setup,
        m,
        p,
        runner: OpenLoopRunner::new(),
    })
}

impl SpcController {
    /// `pN × (mL + pL + mN)`.
    pub fn predictor(&self) -> &DMatrix<f64> {
        &self.predictor
    }

    /// `y_f = 𝒫 col(u_ini, y_ini, u_f)`.
    pub fn predict(
        &self,
        u_ini: &DVector<f64>,
        y_ini: &DVector<f64>,
        u_f: &DVector<f64>,
    ) -> DVector<f64> {
        &self.predictor * vcat(&[u_ini, y_ini, u_f])
    }

    fn solve(&self, k: usize) -> Result<(Vec<DVector<f64>>, f64), ChanceError> {
        let (l, n) = (self.setup.horizons.l, self.setup.horizons.n);
        let (u_ini, y_ini) = self.history.stacked();
        let (ml, pl) = (self.m * l, self.p * l);
        let y_free = self.predictor.columns(0, ml) * u_ini + self.predictor.columns(ml, pl) * y_ini;
        let y_map = self.predictor.columns(ml + pl, self.m * n).into_owned();
        solve_prediction_qp(&self.setup, k, y_free, y_map, self.m, self.p)
    }
}

impl Controller for SpcController {
    fn name(&self) -> &str {
        "SPC"
    }

    fn act(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        self.runner.check_order(t)?;
        if self.runner.needs_plan(t, self.setup.horizons.n_c) {
            let attempt = self.solve(t);
            self.runner.install(&self.setup, t, self.m, attempt)?;
        }
        let u = self.runner.current(t, &[]);
        self.history.push(u.clone(), y.clone());
        Ok(u)
    }

    fn observe(
        &mut self,
        t: usize,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), ControllerError> {
        self.runner.observe(t)?;
        self.history.push(u.clone(), y.clone());
        Ok(())
    }

    fn log(&self) -> &ControllerLog {
        &self.runner.log
    }
}

/// Regularized DeePC.
///
/// The cost and constraints see `g` only through the stacked Hankel matrix
/// `M = col(U_p, Y_p, U_f, Y_f)`, and the penalty `λ_g‖g‖²` never favours a
/// component in the null space of `M`, so `g` is restricted to the row
/// space of `M` without changing the optimizer. The equality `U_p g = u_ini`
/// is then eliminated by a least-norm particular solution plus a null-space
/// parameterization.
#[derive(Debug, Clone)]
pub struct DeepcController {
    up: DMatrix<f64>,
    yp: DMatrix<f64>,
    uf: DMatrix<f64>,
    yf: DMatrix<f64>,
    up_pinv: DMatrix<f64>,
    null: DMatrix<f64>,
    lambda_y: f64,
    lambda_g: f64,
    setup: PredictiveSetup,
    m: usize,
    p: usize,
    history: IoHistory,
    runner: OpenLoopRunner,
}

pub fn deepc_controller(
    data: &OfflineData,
    setup: PredictiveSetup,
    lambda_y: f64,
    lambda_g: f64,
) -> Result<DeepcController, ControllerError> {
    let (m, p) = check_data(data, &setup)?;
    if !(lambda_y > 0.0 && lambda_y.is_finite() && lambda_g >= 0.0 && lambda_g.is_finite()) {
        return Err(ControllerError::InvalidConfig(format!(
            "DeePC needs lambda_y > 0 and lambda_g >= 0, got {lambda_y} and {lambda_g}"
        )));
    }
    let (l, n) = (setup.horizons.l, setup.horizons.n);
    let (up, uf, yp, yf) = past_future_blocks(data, l, n)?;
    let stacked = vstack(&[&up, &yp, &uf, &yf]);
    let svd = crate::numerics::linalg::thin_svd(&stacked);
    let sigma_max = svd.s.max();
    let tol = crate::numerics::linalg::rank_tolerance(sigma_max, stacked.nrows(), stacked.ncols())
        .max(1e-12 * sigma_max);
    let keep: Vec<usize> = (0..svd.s.len()).filter(|&i| svd.s[i] > tol).collect();
    let basis = DMatrix::from_fn(svd.v.nrows(), keep.len(), |r, c| svd.v[(r, keep[c])]);

    let up_z = &up * &basis;
    let up_pinv = pinv(&up_z);
    // Null space of U_p restricted to the row space: eigenvectors of the
    // projector I − U_p†U_p with unit eigenvalue.
    let r = keep.len();
    let proj = symmetrize(&(DMatrix::identity(r, r) - &up_pinv * &up_z));
    let eig = proj.symmetric_eigen();
    let cols: Vec<usize> = (0..r).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let null = DMatrix::from_fn(r, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])]);

    Ok(DeepcController {
        yp: &yp * &basis,
        uf: &uf * &basis,
        yf: &yf * &basis,
        up: up_z,
        up_pinv,
        null,
        lambda_y,
        lambda_g,
        history: IoHistory::new(l, m, p),
        setup,
        m,
        p,
        runner: OpenLoopRunner::new(),
    })
}

impl DeepcController {
    fn solve(&self, k: usize) -> Result<(Vec<DVector<f64>>, f64), ChanceError> {
        let n = self.setup.horizons.n;
        let (m, p) = (self.m, self.p);
        let spec = &self.setup.spec;
        let (u_ini, y_ini) = self.history.stacked();
        let z0 = &self.up_pinv * &u_ini;
        if (&self.up * &z0 - &u_ini).amax() > 1e-8 * (1.0 + u_ini.amax()) {
            return Err(ChanceError::Infeasible);
        }
        let refs = self.setup.refs.window(k, n);
        let r_stack = vcat(&refs.iter().collect::<Vec<_>>());

        let a_u = &self.uf * &self.null;
        let b_u = &self.uf * &z0;
        let a_y = &self.yf * &self.null;
        let b_y = &self.yf * &z0;
        let a_s = &self.yp * &self.null;
        let b_s = &self.yp * &z0 - &y_ini;
        let nw = self.null.ncols();

        let mut q_bar = DMatrix::zeros(p * n, p * n);
        let mut r_bar = DMatrix::zeros(m * n, m * n);
        for t in 0..n {
            q_bar
                .view_mut((t * p, t * p), (p, p))
                .copy_from(&self.setup.q);
            r_bar
                .view_mut((t * m, t * m), (m, m))
                .copy_from(&self.setup.r);
        }
        let e_y = &b_y - &r_stack;
        let offset = e_y.dot(&(&q_bar * &e_y))
            + b_u.dot(&(&r_bar * &b_u))
            + self.lambda_y * b_s.norm_squared()
            + self.lambda_g * z0.norm_squared();

        let (qu, qy) = (spec.q_u(), spec.q_y());
        let rows = n * (qu + qy);
        let mut g = DMatrix::zeros(rows, nw);
        let mut h = DVector::zeros(rows);
        for t in 0..n {
            let base = t * (qu + qy);
            let ut_map = a_u.rows(t * m, m);
            let ut_off = b_u.rows(t * m, m);
            let yt_map = a_y.rows(t * p, p);
            let yt_off = b_y.rows(t * p, p);
            g.rows_mut(base, qu).copy_from(&(&spec.e_u * ut_map));
            h.rows_mut(base, qu)
                .copy_from(&(&spec.f_u - &spec.e_u * ut_off));
            g.rows_mut(base + qu, qy).copy_from(&(&spec.e_y * yt_map));
            h.rows_mut(base + qu, qy)
                .copy_from(&(&spec.f_y - &spec.e_y * yt_off));
        }

        if nw == 0 {
            if h.iter().any(|&v| v < -1e-9) {
                return Err(ChanceError::Infeasible);
            }
            return Ok((split(&b_u, m), offset));
        }
        let hess = (a_y.transpose() * &q_bar * &a_y
            + a_u.transpose() * &r_bar * &a_u
            + a_s.transpose() * &a_s * self.lambda_y
            + self.null.transpose() * &self.null * self.lambda_g)
            * 2.0;
        let lin = (a_y.transpose() * (&q_bar * &e_y)
            + a_u.transpose() * (&r_bar * &b_u)
            + a_s.transpose() * &b_s * self.lambda_y
            + self.null.transpose() * &z0 * self.lambda_g)
            * 2.0;
        let qp = QpProblem::new(symmetrize(&hess), lin, g, h).map_err(ChanceError::from)?;
        let sol = solve_qp(&qp).map_err(|e: QpError| ChanceError::from(e))?;
        let u_f = &a_u * &sol.x + &b_u;
        Ok((split(&u_f, m), sol.objective + offset))
    }
}

impl Controller for DeepcController {
    fn name(&self) -> &str {
        "DeePC"
    }

    fn act(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        self.runner.check_order(t)?;
        if self.runner.needs_plan(t, self.setup.horizons.n_c) {
            let attempt = self.solve(t);
            self.runner.install(&self.setup, t, self.m, attempt)?;
        }
        let u = self.runner.current(t, &[]);
        self.history.push(u.clone(), y.clone());
        Ok(u)
    }

    fn observe(
        &mut self,
        t: usize,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), ControllerError> {
        self.runner.observe(t)?;
        self.history.push(u.clone(), y.clone());
        Ok(())
    }

    fn log(&self) -> &ControllerLog {
        &self.runner.log
    }
}
