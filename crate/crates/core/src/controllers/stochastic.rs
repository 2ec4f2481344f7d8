use nalgebra::{DMatrix, DVector};

use super::{
    is_plan_failure, split, to_vec, warmup_after_start, ControlStepRecord, Controller,
    ControllerError, ControllerLog, FallbackPolicy, PlanStatus, PredictiveSetup, StepRecord,
};
use crate::chance::{
    build_nominal_problem, iterative_risk_allocation, ChanceError, RiskAllocation, TrackingCost,
};
use crate::datadriven::{
    build_aux_model, partition, recover_quantities, AuxModel, OfflineData, RecoveryMode,
};
use crate::estimation::{
    io_variances, kalman_schedule, kf_predict, kf_update, propagate_joint_covariance,
    GaussianBelief, KalmanSchedule,
};
use crate::numerics::solve_dare;
use crate::plant::LtiModel;

/// Policies `π_t(x̂) = u^nom_t + K(x̂ − x^nom_t)` for one control step, with
/// the filter gains and predicted input/output variances they were built
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySchedule {
    pub k: usize,
    pub u_nom: Vec<DVector<f64>>,
    pub x_nom: Vec<DVector<f64>>,
    pub y_nom: Vec<DVector<f64>>,
    pub kalman: KalmanSchedule,
    pub sigma_u: Vec<DMatrix<f64>>,
    pub sigma_y: Vec<DMatrix<f64>>,
    pub allocation: Option<RiskAllocation>,
    pub status: PlanStatus,
    pub iterations: usize,
    pub cost: Option<f64>,
}

/// Chance-constrained receding-horizon controller on a state-space model.
#[derive(Debug, Clone)]
pub struct StochasticController {
    name: String,
    model: LtiModel,
    k_gain: DMatrix<f64>,
    closed_loop_radius: f64,
    setup: PredictiveSetup,
    aux: Option<AuxModel>,
    belief: GaussianBelief,
    xhat_prior: DVector<f64>,
    plans: Vec<PolicySchedule>,
    next_t: usize,
    log: ControllerLog,
}

impl StochasticController {
    /// Validates the setup and computes the LQR gain for state weight
    /// `CᵀQC` and input weight `R`.
    pub fn new(
        name: impl Into<String>,
        model: LtiModel,
        setup: PredictiveSetup,
        prior: GaussianBelief,
    ) -> Result<Self, ControllerError> {
        setup.validate(model.m(), model.p())?;
        if prior.dim() != model.n() {
            return Err(ControllerError::InvalidConfig(format!(
                "prior has dimension {}, model state has {}",
                prior.dim(),
                model.n()
            )));
        }
        let qx = model.c.transpose() * &setup.q * &model.c;
        let dare = solve_dare(&model.a, &model.b, &qx, &setup.r)?;
        Ok(Self {
            name: name.into(),
            k_gain: dare.k,
            closed_loop_radius: dare.closed_loop_radius,
            xhat_prior: prior.mean.clone(),
            belief: prior,
            model,
            setup,
            aux: None,
            plans: Vec::new(),
            next_t: 0,
            log: ControllerLog::default(),
        })
    }

    /// Runs on an auxiliary model built elsewhere.
    pub fn from_aux_model(
        aux: AuxModel,
        setup: PredictiveSetup,
        prior: GaussianBelief,
    ) -> Result<Self, ControllerError> {
        let mut ctrl = Self::new("SDDPC", aux.model.clone(), setup, prior)?;
        ctrl.aux = Some(aux);
        Ok(ctrl)
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn aux_model(&self) -> Option<&AuxModel> {
        self.aux.as_ref()
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k_gain
    }

    /// Spectral radius of `A + BK`.
    pub fn closed_loop_radius(&self) -> f64 {
        self.closed_loop_radius
    }

    pub fn setup(&self) -> &PredictiveSetup {
        &self.setup
    }

    /// Prior for the next control step.
    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    /// Every plan executed so far, oldest first.
    pub fn plans(&self) -> &[PolicySchedule] {
        &self.plans
    }

    /// `π_t` evaluated at step `i` of `plan`.
    pub fn policy(&self, plan: &PolicySchedule, i: usize, xhat: &DVector<f64>) -> DVector<f64> {
        &plan.u_nom[i] + &self.k_gain * (xhat - &plan.x_nom[i])
    }

    fn variances(
        &self,
        cov: &DMatrix<f64>,
    ) -> Result<(KalmanSchedule, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), ControllerError> {
        let n = self.setup.horizons.n;
        let kalman = kalman_schedule(&self.model, cov, n)?;
        let joint = propagate_joint_covariance(&self.model, &self.k_gain, &kalman, cov, n)?;
        let (su, sy) = io_variances(&self.model, &self.k_gain, &joint);
        Ok((kalman, su, sy))
    }

    fn nominal_states(
        &self,
        mean: &DVector<f64>,
        u_nom: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut x_nom = Vec::with_capacity(u_nom.len());
        let mut x = mean.clone();
        for u in u_nom {
            let next = &self.model.a * &x + &self.model.b * u;
            x_nom.push(x);
            x = next;
        }
        let y_nom = x_nom.iter().map(|x| &self.model.c * x).collect();
        (x_nom, y_nom)
    }

    /// Solves the control-step problem at `k` from `belief` without
    /// touching the controller state. Infeasibility is returned as an
    /// error; an iteration cap in risk allocation is not.
    pub fn plan_from_belief(
        &self,
        k: usize,
        belief: &GaussianBelief,
    ) -> Result<PolicySchedule, ControllerError> {
        let n = self.setup.horizons.n;
        let (kalman, sigma_u, sigma_y) = self.variances(&belief.cov)?;
        let refs = self.setup.refs.window(k, n);
        let cost = TrackingCost {
            q: &self.setup.q,
            r: &self.setup.r,
            refs: &refs,
        };
        let problem = build_nominal_problem(
            &self.model,
            &belief.mean,
            &self.setup.spec,
            &cost,
            &sigma_u,
            &sigma_y,
            n,
        )?;
        let (outcome, status) = match iterative_risk_allocation(&problem, &self.setup.ira) {
            Ok(out) => (out, PlanStatus::Solved),
            Err(ChanceError::MaxOuterIter { last, .. }) => (*last, PlanStatus::MaxOuterIter),
            Err(e) => return Err(e.into()),
        };
        let u_nom = split(&outcome.u_nom, self.model.m());
        let (x_nom, y_nom) = self.nominal_states(&belief.mean, &u_nom);
        Ok(PolicySchedule {
            k,
            u_nom,
            x_nom,
            y_nom,
            kalman,
            sigma_u,
            sigma_y,
            allocation: Some(outcome.allocation),
            status,
            iterations: outcome.iterations,
            cost: Some(outcome.cost),
        })
    }

    fn fallback_plan(&self, k: usize) -> Result<PolicySchedule, ControllerError> {
        let (kalman, sigma_u, sigma_y) = self.variances(&self.belief.cov)?;
        let n = self.setup.horizons.n;
        let (u_nom, x_nom, status) = match self.plans.last() {
            Some(prev) => {
                let shift = k - prev.k;
                let u_nom: Vec<DVector<f64>> = (0..n)
                    .map(|i| prev.u_nom[(i + shift).min(n - 1)].clone())
                    .collect();
                let mut x_nom: Vec<DVector<f64>> = Vec::with_capacity(n);
                for i in 0..n {
                    let x = match prev.x_nom.get(i + shift) {
                        Some(x) => x.clone(),
                        None => &self.model.a * &x_nom[i - 1] + &self.model.b * &u_nom[i - 1],
                    };
                    x_nom.push(x);
                }
                (u_nom, x_nom, PlanStatus::HeldLastPlan)
            }
            None => {
                let u_nom = vec![DVector::zeros(self.model.m()); n];
                let (x_nom, _) = self.nominal_states(&self.belief.mean, &u_nom);
                (u_nom, x_nom, PlanStatus::ZeroFallback)
            }
        };
        let y_nom = x_nom.iter().map(|x| &self.model.c * x).collect();
        Ok(PolicySchedule {
            k,
            u_nom,
            x_nom,
            y_nom,
            kalman,
            sigma_u,
            sigma_y,
            allocation: None,
            status,
            iterations: 0,
            cost: None,
        })
    }

    fn replan(&mut self, k: usize) -> Result<(), ControllerError> {
        let (plan, note) = match self.plan_from_belief(k, &self.belief) {
            Ok(plan) => (plan, None),
            Err(ControllerError::Chance(e)) if is_plan_failure(&e) => {
                if self.setup.fallback == FallbackPolicy::Fail {
                    return Err(ControllerError::Infeasible { step: k });
                }
                (self.fallback_plan(k)?, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        self.log.control_steps.push(ControlStepRecord {
            k,
            status: plan.status,
            iterations: plan.iterations,
            cost: plan.cost,
            u_nom: plan.u_nom.iter().map(to_vec).collect(),
            note,
        });
        self.xhat_prior = self.belief.mean.clone();
        self.plans.push(plan);
        Ok(())
    }
}

impl Controller for StochasticController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        if t != self.next_t {
            return Err(ControllerError::OutOfOrder {
                expected: self.next_t,
                got: t,
            });
        }
        let n_c = self.setup.horizons.n_c;
        if self.plans.last().is_none_or(|p| t - p.k >= n_c) {
            self.replan(t)?;
        }
        let plan = self.plans.last().expect("plan exists after replanning");
        let i = t - plan.k;
        let xhat = kf_update(&self.xhat_prior, y, &plan.kalman.gains[i], &self.model)?;
        let u = self.policy(plan, i, &xhat);
        let next_prior = kf_predict(&xhat, &u, &self.model)?;
        if i + 1 == n_c {
            self.belief = GaussianBelief {
                mean: next_prior.clone(),
                cov: plan.kalman.p_prior[n_c].clone(),
            };
        }
        self.xhat_prior = next_prior;
        self.log.steps.push(StepRecord {
            t,
            u: to_vec(&u),
            estimate: to_vec(&xhat),
        });
        self.next_t += 1;
        Ok(u)
    }

    fn observe(
        &mut self,
        t: usize,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), ControllerError> {
        if t != self.next_t {
            return Err(ControllerError::OutOfOrder {
                expected: self.next_t,
                got: t,
            });
        }
        if !self.plans.is_empty() {
            return Err(warmup_after_start());
        }
        let step = kalman_schedule(&self.model, &self.belief.cov, 1)?;
        let xhat = kf_update(&self.belief.mean, y, &step.gains[0], &self.model)?;
        self.belief = GaussianBelief {
            mean: kf_predict(&xhat, u, &self.model)?,
            cov: step.p_prior[1].clone(),
        };
        self.xhat_prior = self.belief.mean.clone();
        self.next_t += 1;
        Ok(())
    }

    fn log(&self) -> &ControllerLog {
        &self.log
    }
}

/// SMPC on the true model.
pub fn smpc_controller(
    model: LtiModel,
    setup: PredictiveSetup,
    prior: GaussianBelief,
) -> Result<StochasticController, ControllerError> {
    StochasticController::new("SMPC", model, setup, prior)
}

/// Offline parameters of the data-driven controller.
#[derive(Debug, Clone, PartialEq)]
pub struct SddpcParams {
    /// Covariance of the stacked process-noise response, `pL × pL`.
    pub sigma_rho: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub mode: RecoveryMode,
}

/// SDDPC: recovers the predictors from `data`, builds the auxiliary model
/// and runs the stochastic loop on it. `prior` lives on the auxiliary
/// state.
pub fn sddpc_controller(
    data: &OfflineData,
    setup: PredictiveSetup,
    params: &SddpcParams,
    prior: GaussianBelief,
) -> Result<StochasticController, ControllerError> {
    let dm = partition(data, setup.horizons.l)?;
    let rq = recover_quantities(&dm, params.mode)?;
    let aux = build_aux_model(&rq, &params.sigma_rho, &params.sigma_v)?;
    StochasticController::from_aux_model(aux, setup, prior)
}
