use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{matrix, ControllerSpec, ExperimentConfig};
use super::run::{collect_data, realization, sddpc_from_spec};
use super::{HarnessError, OFFLINE_STREAM};
use crate::controllers::{
    sddpc_controller, smpc_controller, Controller, PolicySchedule, SddpcParams,
    StochasticController,
};
use crate::datadriven::oracles::{build_phi_oracles, matched_prior, matched_sigma_rho};
use crate::datadriven::{collect_offline_data, is_persistently_exciting, partition, RecoveryMode};
use crate::estimation::{kf_predict, kf_update, GaussianBelief};
use crate::numerics::linalg::{max_relative_deviation, psd_factor, rank, vstack};
use crate::plant::{simulate_closed_loop, standard_normal_vector, step_rng, LtiModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub passed: bool,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub deviation_x: f64,
    pub deviation_u: f64,
    pub deviation_y: f64,
    pub steps: usize,
    pub matched_noise: bool,
    /// Control steps that fell back to a held or zero plan, per controller.
    pub fallbacks: (usize, usize),
}

fn stack(seq: &[DVector<f64>]) -> DMatrix<f64> {
    let cols: Vec<_> = seq.iter().map(|v| v.clone_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// Runs the model-based controller on the plant and the data-driven one
/// on noise-free data recorded from it, on the same noise, and compares
/// the state, input and output trajectories.
///
/// The auxiliary noise covariance and prior are set to the values that
/// match the plant (unless `cfg.equivalence.sigma_rho` overrides the
/// former); the predictors are recovered by pseudoinverse. The length and
/// excitation of the offline data and the horizon `L` are checked before
/// anything runs.
pub fn equivalence_check(cfg: &ExperimentConfig) -> Result<EquivalenceReport, HarnessError> {
    let prep = cfg.prepare()?;
    let model = &prep.model;
    let (n, m, p) = (model.n(), model.m(), model.p());
    let l = prep.setup.horizons.l;

    let dims = model.check_assumption_dims(l);
    if !dims.holds() {
        return Err(HarnessError::Assumption(dims.deficiencies().join("; ")));
    }
    if !prep.warmup.is_empty() {
        return Err(HarnessError::Config(
            "the equivalence check runs without warmup".into(),
        ));
    }
    let input_std = cfg.offline.input_std;
    if !(input_std > 0.0 && input_std.is_finite()) {
        return Err(HarnessError::Config(
            "offline.input_std must be positive".into(),
        ));
    }
    let data = collect_offline_data(
        model,
        cfg.offline.length,
        input_std,
        false,
        cfg.seed,
        OFFLINE_STREAM,
    )
    .map_err(|e| HarnessError::Assumption(e.to_string()))?;
    let order = 2 * l + n;
    if !is_persistently_exciting(&data.u, order) {
        return Err(HarnessError::Assumption(format!(
            "offline input of length {} is not persistently exciting of order {order}",
            data.len()
        )));
    }
    let dm = partition(&data, l).map_err(|e| HarnessError::Assumption(e.to_string()))?;
    let needed = 2 * m * l + n;
    let got = rank(&vstack(&[&dm.u1, &dm.y1, &dm.u2]));
    if got != needed {
        return Err(HarnessError::Assumption(format!(
            "col(U1, Y1, U2) has rank {got}, expected {needed}"
        )));
    }

    let matched = cfg.equivalence.sigma_rho.is_none();
    let sigma_rho = match &cfg.equivalence.sigma_rho {
        Some(rows) => {
            let s = matrix("equivalence.sigma_rho", rows)?;
            if s.shape() != (p * l, p * l) {
                return Err(HarnessError::Config(format!(
                    "equivalence.sigma_rho must be {0}x{0}",
                    p * l
                )));
            }
            s
        }
        None => matched_sigma_rho(model, l),
    };
    let aux_prior = matched_prior(&prep.initial, &build_phi_oracles(model, l))?;
    let params = SddpcParams {
        sigma_rho,
        sigma_v: model.sigma_v.clone(),
        mode: RecoveryMode::Exact,
    };
    let setup = prep.setup.clone();
    let mut smpc = smpc_controller(model.clone(), setup.clone(), prep.initial.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut sddpc = sddpc_controller(&data, setup, &params, aux_prior)
        .map_err(|e| HarnessError::Config(e.to_string()))?;

    let (noise, x0) = realization(cfg, &prep);
    let run = |ctrl: &mut StochasticController| -> Result<Trajectory, HarnessError> {
        simulate_closed_loop::<_, HarnessError>(
            model,
            |t, y| Ok(ctrl.act(t, y)?),
            &x0,
            &noise,
            cfg.steps,
        )
    };
    let a = run(&mut smpc)?;
    let b = run(&mut sddpc)?;
    let deviation_x = max_relative_deviation(&stack(&b.x), &stack(&a.x));
    let deviation_u = max_relative_deviation(&stack(&b.u), &stack(&a.u));
    let deviation_y = max_relative_deviation(&stack(&b.y), &stack(&a.y));
    let max_deviation = deviation_x.max(deviation_u).max(deviation_y);
    let tolerance = cfg.equivalence.tolerance;
    Ok(EquivalenceReport {
        passed: max_deviation <= tolerance,
        tolerance,
        max_deviation,
        deviation_x,
        deviation_u,
        deviation_y,
        steps: cfg.steps,
        matched_noise: matched,
        fallbacks: (smpc.log().fallback_count(), sddpc.log().fallback_count()),
    })
}

/// Predicted and empirical value of one entry of a mean or covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEntry {
    pub t: usize,
    /// `"u"` or `"y"`.
    pub signal: &'static str,
    /// `"mean"` or `"cov"`.
    pub kind: &'static str,
    pub i: usize,
    pub j: usize,
    pub predicted: f64,
    pub empirical: f64,
    pub std_error: f64,
    /// Deviation in standard errors. With a zero standard error this is 0
    /// for an exact match and infinite otherwise.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub samples: usize,
    pub horizon: usize,
    pub threshold: f64,
    pub max_abs_z: f64,
    pub passed: bool,
    pub entries: Vec<McEntry>,
}

const MC_THRESHOLD: f64 = 4.0;
const MC_CHUNK: usize = 1024;

/// Inputs and outputs over the horizon for one noise draw.
fn replay(
    ctrl: &StochasticController,
    model: &LtiModel,
    plan: &PolicySchedule,
    prior: &GaussianBelief,
    factors: &(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
    seed: u64,
    sample: u64,
) -> Vec<DVector<f64>> {
    let (fx, fw, fv) = factors;
    let (n, m, p) = (model.n(), model.m(), model.p());
    let horizon = plan.u_nom.len();
    let mut rng = step_rng(seed, sample, 0);
    let mut x = &prior.mean + fx * standard_normal_vector(&mut rng, n);
    let mut xhat_prior = prior.mean.clone();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut rng = step_rng(seed, sample, t + 1);
        let z = standard_normal_vector(&mut rng, n + p);
        let w = fw * z.rows(0, n);
        let v = fv * z.rows(n, p);
        let y = &model.c * &x + v;
        let xhat =
            kf_update(&xhat_prior, &y, &plan.kalman.gains[t], model).expect("dimensions checked");
        let u = ctrl.policy(plan, t, &xhat);
        xhat_prior = kf_predict(&xhat, &u, model).expect("dimensions checked");
        x = &model.a * &x + &model.b * &u + w;
        let mut uy = DVector::zeros(m + p);
        uy.rows_mut(0, m).copy_from(&u);
        uy.rows_mut(m, p).copy_from(&y);
        out.push(uy);
    }
    out
}

/// Freezes the first control step's policies and replays `samples` noise
/// draws through the plant, filter and policy, comparing the empirical
/// mean and covariance of `(u_t, y_t)` with the predicted `u^nom_t`,
/// `y^nom_t`, `Σ^u_t` and `Σ^y_t`.
///
/// Works for SMPC on the plant and for SDDPC on its auxiliary model; the
/// initial state is drawn from the controller's prior. Sample `j` draws
/// from stream `j` of the configured seed.
pub fn mc_validate_distribution(
    cfg: &ExperimentConfig,
    samples: usize,
) -> Result<McReport, HarnessError> {
    if samples < 2 {
        return Err(HarnessError::Config("need at least two samples".into()));
    }
    let prep = cfg.prepare()?;
    let ctrl: StochasticController = match &cfg.controller {
        ControllerSpec::Smpc => {
            smpc_controller(prep.model.clone(), prep.setup.clone(), prep.initial.clone())
                .map_err(|e| HarnessError::Config(e.to_string()))?
        }
        ControllerSpec::Sddpc(s) => {
            let data = collect_data(cfg, &prep)?;
            sddpc_from_spec(s, &prep, &data)?
        }
        _ => {
            return Err(HarnessError::Config(
                "distribution check needs a stochastic controller (smpc or sddpc)".into(),
            ))
        }
    };
    let model = ctrl.model().clone();
    let prior = ctrl.belief().clone();
    let plan = ctrl.plan_from_belief(0, &prior)?;
    let (m, p) = (model.m(), model.p());
    let d = m + p;
    let horizon = plan.u_nom.len();
    let factors = (
        psd_factor(&prior.cov),
        psd_factor(&model.sigma_w),
        psd_factor(&model.sigma_v),
    );
    let seed = cfg.seed;

    // Shifted sums around the first sample keep identical samples exact.
    let base = replay(&ctrl, &model, &plan, &prior, &factors, seed, 0);
    let zero = || {
        (
            vec![DVector::<f64>::zeros(d); horizon],
            vec![DMatrix::<f64>::zeros(d, d); horizon],
        )
    };
    let chunks = samples.div_ceil(MC_CHUNK);
    let partial: Vec<_> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let (mut s1, mut s2) = zero();
            for j in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(samples) {
                let path = replay(&ctrl, &model, &plan, &prior, &factors, seed, j as u64);
                for t in 0..horizon {
                    let dv = &path[t] - &base[t];
                    s2[t] += &dv * dv.transpose();
                    s1[t] += dv;
                }
            }
            (s1, s2)
        })
        .collect();
    let (mut s1, mut s2) = zero();
    for (a, b) in partial {
        for t in 0..horizon {
            s1[t] += &a[t];
            s2[t] += &b[t];
        }
    }

    let mf = samples as f64;
    let mut entries = Vec::new();
    for t in 0..horizon {
        let mean = &base[t] + &s1[t] / mf;
        let cov = (&s2[t] - &s1[t] * s1[t].transpose() / mf) / (mf - 1.0);
        let mut pred_mean = DVector::zeros(d);
        pred_mean.rows_mut(0, m).copy_from(&plan.u_nom[t]);
        pred_mean.rows_mut(m, p).copy_from(&plan.y_nom[t]);
        let mut pred_cov = DMatrix::zeros(d, d);
        pred_cov
            .view_mut((0, 0), (m, m))
            .copy_from(&plan.sigma_u[t]);
        pred_cov
            .view_mut((m, m), (p, p))
            .copy_from(&plan.sigma_y[t]);
        for (signal, off, len) in [("u", 0, m), ("y", m, p)] {
            for i in 0..len {
                let a = off + i;
                let se = (pred_cov[(a, a)] / mf).sqrt();
                entries.push(entry(t, signal, "mean", i, i, pred_mean[a], mean[a], se));
                for j in i..len {
                    let b = off + j;
                    let se = ((pred_cov[(a, a)] * pred_cov[(b, b)] + pred_cov[(a, b)].powi(2))
                        / mf)
                        .sqrt();
                    entries.push(entry(
                        t,
                        signal,
                        "cov",
                        i,
                        j,
                        pred_cov[(a, b)],
                        cov[(a, b)],
                        se,
                    ));
                }
            }
        }
    }
    let max_abs_z = entries.iter().map(|e| e.z.abs()).fold(0.0, f64::max);
    Ok(McReport {
        samples,
        horizon,
        threshold: MC_THRESHOLD,
        max_abs_z,
        passed: max_abs_z <= MC_THRESHOLD,
        entries,
    })
}

#[allow(clippy::too_many_arguments)]
fn entry(
    t: usize,
    signal: &'static str,
    kind: &'static str,
    i: usize,
    j: usize,
    predicted: f64,
    empirical: f64,
    std_error: f64,
) -> McEntry {
    let diff = empirical - predicted;
    // Rounding floor for deterministic entries.
    let floor = 1e-12 * (1.0 + predicted.abs());
    let z = if std_error > 0.0 {
        diff / std_error
    } else if diff.abs() <= floor {
        0.0
    } else {
        f64::INFINITY
    };
    McEntry {
        t,
        signal,
        kind,
        i,
        j,
        predicted,
        empirical,
        std_error,
        z,
    }
}
