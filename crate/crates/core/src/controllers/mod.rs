//! Receding-horizon controllers sharing one plant callback contract.
//!
//! [`StochasticController`] runs the chance-constrained loop with an affine
//! output-feedback policy. It works on any [`LtiModel`], so the same engine
//! serves the true plant (SMPC) and the data-built auxiliary model (SDDPC).
//! The deterministic benchmarks live in [`benchmarks`].

pub mod benchmarks;
mod stochastic;

pub use benchmarks::{
    deepc_controller, mpc_controller, spc_controller, DeepcController, MpcController, SpcController,
};
pub use stochastic::{
    sddpc_controller, smpc_controller, PolicySchedule, SddpcParams, StochasticController,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chance::{ChanceError, IraSettings, PolytopeSpec};
use crate::datadriven::DataError;
use crate::estimation::EstimationError;
use crate::numerics::qp::QpError;
use crate::numerics::NumericsError;
use crate::plant::PlantError;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("controller called at t = {got}, expected t = {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("no feasible plan at control step {step}")]
    Infeasible { step: usize },
    #[error(transparent)]
    Chance(#[from] ChanceError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Initial-condition horizon `L`, prediction horizon `N` and control
/// horizon `N_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub l: usize,
    pub n: usize,
    pub n_c: usize,
}

impl HorizonConfig {
    pub fn new(l: usize, n: usize, n_c: usize) -> Result<Self, ControllerError> {
        if l == 0 || n_c == 0 || n_c > n {
            return Err(ControllerError::InvalidConfig(format!(
                "need L >= 1 and 1 <= N_c <= N, got L = {l}, N = {n}, N_c = {n_c}"
            )));
        }
        Ok(Self { l, n, n_c })
    }
}

/// Piecewise-constant reference: each segment holds from its start time
/// until the next segment starts, the last one indefinitely.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSchedule {
    segments: Vec<(usize, DVector<f64>)>,
}

impl ReferenceSchedule {
    pub fn constant(r: DVector<f64>) -> Self {
        Self {
            segments: vec![(0, r)],
        }
    }

    /// Segments must start at 0, be strictly increasing in time and share a
    /// dimension.
    pub fn piecewise(segments: Vec<(usize, DVector<f64>)>) -> Result<Self, ControllerError> {
        let ok = segments.first().is_some_and(|(t0, _)| *t0 == 0)
            && segments
                .windows(2)
                .all(|w| w[0].0 < w[1].0 && w[0].1.len() == w[1].1.len())
            && segments
                .iter()
                .all(|(_, r)| r.iter().all(|v| v.is_finite()));
        if !ok {
            return Err(ControllerError::InvalidConfig(
                "reference segments must start at t = 0, increase strictly and share a dimension"
                    .into(),
            ));
        }
        Ok(Self { segments })
    }

    pub fn dim(&self) -> usize {
        self.segments[0].1.len()
    }

    pub fn at(&self, t: usize) -> &DVector<f64> {
        let idx = self.segments.partition_point(|(start, _)| *start <= t);
        &self.segments[idx - 1].1
    }

    /// `r_t, …, r_{t+len−1}`.
    pub fn window(&self, t: usize, len: usize) -> Vec<DVector<f64>> {
        (t..t + len).map(|s| self.at(s).clone()).collect()
    }
}

/// What to do when a control step has no feasible plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum FallbackPolicy {
    /// Keep executing the previous plan, advanced by `N_c` steps. Without a
    /// previous plan the nominal inputs are zero.
    #[default]
    HoldLastPlan,
    /// Return [`ControllerError::Infeasible`].
    Fail,
}

/// Everything a predictive controller needs besides its model or data.
#[derive(Debug, Clone)]
pub struct PredictiveSetup {
    pub horizons: HorizonConfig,
    pub spec: PolytopeSpec,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub refs: ReferenceSchedule,
    pub ira: IraSettings,
    pub fallback: FallbackPolicy,
}

impl PredictiveSetup {
    pub fn new(
        horizons: HorizonConfig,
        spec: PolytopeSpec,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        refs: ReferenceSchedule,
    ) -> Self {
        Self {
            horizons,
            spec,
            q,
            r,
            refs,
            ira: IraSettings::default(),
            fallback: FallbackPolicy::default(),
        }
    }

    pub(crate) fn validate(&self, m: usize, p: usize) -> Result<(), ControllerError> {
        let bad = |msg: String| Err(ControllerError::InvalidConfig(msg));
        if self.q.shape() != (p, p) || self.r.shape() != (m, m) {
            return bad(format!("Q must be {p}x{p} and R {m}x{m}"));
        }
        if self.spec.e_u.ncols() != m || self.spec.e_y.ncols() != p {
            return bad("constraint matrices do not match the plant dimensions".into());
        }
        if self.refs.dim() != p {
            return bad(format!(
                "reference has dimension {}, plant has {p} outputs",
                self.refs.dim()
            ));
        }
        for (name, w) in [("Q", &self.q), ("R", &self.r)] {
            let asym = (w - w.transpose()).amax();
            if asym > 1e-12 * (1.0 + w.amax()) || w.clone().cholesky().is_none() {
                return bad(format!("{name} must be symmetric positive definite"));
            }
        }
        Ok(())
    }
}

/// How the plan of a control step was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlanStatus {
    Solved,
    /// Risk allocation hit its iteration cap; the last iterate is used.
    MaxOuterIter,
    /// No feasible plan; the previous one was advanced.
    HeldLastPlan,
    /// No feasible plan and nothing to hold; nominal inputs are zero.
    ZeroFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlStepRecord {
    pub k: usize,
    pub status: PlanStatus,
    /// QP solves spent on this control step.
    pub iterations: usize,
    pub cost: Option<f64>,
    pub u_nom: Vec<Vec<f64>>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    /// Filtered state estimate used to compute `u`; empty for controllers
    /// without a state estimate.
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControllerLog {
    pub control_steps: Vec<ControlStepRecord>,
    pub steps: Vec<StepRecord>,
}

impl ControllerLog {
    pub fn fallback_count(&self) -> usize {
        self.control_steps
            .iter()
            .filter(|r| {
                matches!(
                    r.status,
                    PlanStatus::HeldLastPlan | PlanStatus::ZeroFallback
                )
            })
            .count()
    }
}

/// Plant callback contract: called once per time step, in order, with the
/// current measurement; returns the input to apply.
pub trait Controller: Send {
    fn name(&self) -> &str;
    fn act(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, ControllerError>;
    /// Feeds one step of a controller-off segment: `y` was measured at `t`
    /// and the prescribed `u` applied. Only allowed before the first
    /// [`act`](Controller::act).
    fn observe(
        &mut self,
        t: usize,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), ControllerError>;
    fn log(&self) -> &ControllerLog;
}

pub(crate) fn warmup_after_start() -> ControllerError {
    ControllerError::InvalidConfig("warmup steps must precede the first control step".into())
}

pub(crate) fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Splits a stacked vector into `len`-sized pieces.
pub(crate) fn split(v: &DVector<f64>, len: usize) -> Vec<DVector<f64>> {
    (0..v.len() / len)
        .map(|i| v.rows(i * len, len).into_owned())
        .collect()
}

/// Open-loop input sequence computed at step `k`.
#[derive(Debug, Clone)]
pub(crate) struct OpenLoopPlan {
    pub k: usize,
    pub u: Vec<DVector<f64>>,
}

impl OpenLoopPlan {
    /// The previous plan advanced to step `k`, padded with its last input.
    pub fn advanced(&self, k: usize) -> OpenLoopPlan {
        let shift = k - self.k;
        let n = self.u.len();
        let u = (0..n)
            .map(|i| self.u[(i + shift).min(n - 1)].clone())
            .collect();
        OpenLoopPlan { k, u }
    }
}

/// Handles a failed plan for the open-loop benchmarks.
pub(crate) fn open_loop_fallback(
    fallback: FallbackPolicy,
    previous: Option<&OpenLoopPlan>,
    k: usize,
    n: usize,
    m: usize,
) -> Result<(OpenLoopPlan, PlanStatus), ControllerError> {
    match (fallback, previous) {
        (FallbackPolicy::Fail, _) => Err(ControllerError::Infeasible { step: k }),
        (FallbackPolicy::HoldLastPlan, Some(prev)) => {
            Ok((prev.advanced(k), PlanStatus::HeldLastPlan))
        }
        (FallbackPolicy::HoldLastPlan, None) => Ok((
            OpenLoopPlan {
                k,
                u: vec![DVector::zeros(m); n],
            },
            PlanStatus::ZeroFallback,
        )),
    }
}

/// Whether an error from a plan solve is a recoverable planning failure.
pub(crate) fn is_plan_failure(e: &ChanceError) -> bool {
    matches!(e, ChanceError::Infeasible | ChanceError::Qp(_))
}
