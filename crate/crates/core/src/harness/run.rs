use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{matrix, ControllerSpec, ExperimentConfig, Prepared, SddpcSpec};
use super::{HarnessError, INITIAL_STATE_TAG, OFFLINE_STREAM};
use crate::controllers::{
    deepc_controller, mpc_controller, sddpc_controller, smpc_controller, spc_controller, to_vec,
    Controller, PlanStatus, SddpcParams, StochasticController,
};
use crate::datadriven::{collect_offline_data, default_sigma_rho, OfflineData, RecoveryMode};
use crate::estimation::GaussianBelief;
use crate::numerics::linalg::{kron_identity, psd_factor};
use crate::plant::{
    load_io_csv, sample_noise_stream, simulate_closed_loop, standard_normal_vector, step_rng,
    NoiseRealization, Trajectory,
};

/// Offline data for the data-driven controllers.
pub fn collect_data(cfg: &ExperimentConfig, prep: &Prepared) -> Result<OfflineData, HarnessError> {
    let model = &prep.model;
    let data = match &cfg.offline.csv {
        Some(path) => {
            let rec = load_io_csv(path)?;
            OfflineData::new(rec.u, rec.y)?
        }
        None => collect_offline_data(
            model,
            cfg.offline.length,
            cfg.offline.input_std,
            cfg.offline.noisy,
            cfg.seed,
            OFFLINE_STREAM,
        )?,
    };
    if data.is_empty() || data.m() != model.m() || data.p() != model.p() {
        return Err(HarnessError::Config(format!(
            "offline data must be non-empty with {} inputs and {} outputs",
            model.m(),
            model.p()
        )));
    }
    Ok(data)
}

/// Pretty-printed JSON followed by a newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// Columns `t, u…, y…`, readable by [`load_io_csv`].
pub fn write_offline_csv<W: Write>(data: &OfflineData, out: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=data.m()).map(|i| format!("u{i}")));
    header.extend((1..=data.p()).map(|i| format!("y{i}")));
    wtr.write_record(&header)?;
    for (t, (u, y)) in data.u.iter().zip(&data.y).enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(u.iter().map(f64::to_string));
        row.extend(y.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `x_0 = μ + Fz` with `FFᵀ = Σ` and `z` from the run's tagged stream.
pub fn sample_initial_state(initial: &GaussianBelief, seed: u64, stream: u64) -> DVector<f64> {
    let mut rng = step_rng(seed, stream ^ INITIAL_STATE_TAG, 0);
    let z = standard_normal_vector(&mut rng, initial.dim());
    &initial.mean + psd_factor(&initial.cov) * z
}

fn sized_or(
    name: &str,
    rows: Option<&Vec<Vec<f64>>>,
    fallback: DMatrix<f64>,
) -> Result<DMatrix<f64>, HarnessError> {
    match rows {
        None => Ok(fallback),
        Some(rows) => {
            let m = matrix(name, rows)?;
            if m.shape() != fallback.shape() {
                return Err(HarnessError::Config(format!(
                    "{name} must be {}x{}",
                    fallback.nrows(),
                    fallback.ncols()
                )));
            }
            Ok(m)
        }
    }
}

/// SDDPC as configured by `s`. When no prior is given the auxiliary state
/// starts at zero with uncertainty only in its noise-response block.
pub(crate) fn sddpc_from_spec(
    s: &SddpcSpec,
    prep: &Prepared,
    data: &OfflineData,
) -> Result<StochasticController, HarnessError> {
    let model = &prep.model;
    let (l, m, p) = (prep.setup.horizons.l, model.m(), model.p());
    let sigma_rho = sized_or("sigma_rho", s.sigma_rho.as_ref(), default_sigma_rho(p, l))?;
    let sigma_v = sized_or("sigma_v", s.sigma_v.as_ref(), model.sigma_v.clone())?;
    let mode = match s.lambda {
        x if x == 0.0 => RecoveryMode::Exact,
        x if x > 0.0 && x.is_finite() => RecoveryMode::Tikhonov(x),
        x => {
            return Err(HarnessError::Config(format!(
                "sddpc lambda must be >= 0, got {x}"
            )))
        }
    };
    let n_aux = m * l + p * l + p * l * l;
    let prior = match &s.prior {
        Some(b) => b.build("sddpc prior", n_aux)?,
        None => {
            let mut cov = DMatrix::zeros(n_aux, n_aux);
            let tail = p * l * l;
            cov.view_mut((n_aux - tail, n_aux - tail), (tail, tail))
                .copy_from(&kron_identity(l, &sigma_rho));
            GaussianBelief {
                mean: DVector::zeros(n_aux),
                cov,
            }
        }
    };
    let params = SddpcParams {
        sigma_rho,
        sigma_v,
        mode,
    };
    sddpc_controller(data, prep.setup.clone(), &params, prior)
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Plant noise and initial state of the run described by `cfg`.
pub fn realization(cfg: &ExperimentConfig, prep: &Prepared) -> (NoiseRealization, DVector<f64>) {
    let model = &prep.model;
    if cfg.noise_free {
        return (
            NoiseRealization::zeros(model.n(), model.p(), cfg.steps),
            prep.initial.mean.clone(),
        );
    }
    (
        sample_noise_stream(model, cfg.steps, cfg.seed, cfg.stream),
        sample_initial_state(&prep.initial, cfg.seed, cfg.stream),
    )
}

/// Builds the configured controller. Construction failures count as
/// validation errors.
pub fn build_controller(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    data: Option<&OfflineData>,
) -> Result<Box<dyn Controller>, HarnessError> {
    let model = &prep.model;
    let setup = prep.setup.clone();
    let need = || data.ok_or_else(|| HarnessError::Config("controller needs offline data".into()));
    let ctrl: Result<Box<dyn Controller>, _> = match &cfg.controller {
        ControllerSpec::Smpc => {
            smpc_controller(model.clone(), setup, prep.initial.clone()).map(|c| Box::new(c) as _)
        }
        ControllerSpec::Mpc => {
            mpc_controller(model.clone(), setup, prep.initial.clone()).map(|c| Box::new(c) as _)
        }
        ControllerSpec::Sddpc(s) => return Ok(Box::new(sddpc_from_spec(s, prep, need()?)?)),
        ControllerSpec::Deepc(d) => {
            deepc_controller(need()?, setup, d.lambda_y, d.lambda_g).map(|c| Box::new(c) as _)
        }
        ControllerSpec::Spc(s) => {
            spc_controller(need()?, setup, s.lambda).map(|c| Box::new(c) as _)
        }
    };
    ctrl.map_err(|e| HarnessError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub t: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    /// `‖y_t − r_t‖²_Q + ‖u_t‖²_R`.
    pub stage_cost: f64,
    /// `max(0, e_iᵀy_t − f_i)` for each output constraint row.
    pub violations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlStepSummary {
    pub k: usize,
    pub status: PlanStatus,
    pub iterations: usize,
    pub cost: Option<f64>,
    pub note: Option<String>,
}

/// Outcome of one closed-loop run. Aggregates cover the steps from
/// `metrics_from` on; `records` cover the whole run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub controller: String,
    pub seed: u64,
    pub stream: u64,
    pub steps: usize,
    pub warmup: usize,
    pub metrics_from: usize,
    pub records: Vec<StepReport>,
    pub cumulative_cost: f64,
    /// Steps with at least one violated output row.
    pub violation_count: usize,
    pub violation_rate: f64,
    pub total_violation_amount: f64,
    pub row_violation_counts: Vec<usize>,
    pub row_violation_rates: Vec<f64>,
    /// QP solves per control step.
    pub ira_iterations: Vec<usize>,
    pub fallback_count: usize,
    pub control_steps: Vec<ControlStepSummary>,
    #[serde(skip)]
    pub trajectory: Trajectory,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunReport {
    /// Columns `t, x…, u…, y…, r…, stage_cost, viol…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let traj = &self.trajectory;
        let n = traj.x.first().map_or(0, |x| x.len());
        let first = self.records.first();
        let m = first.map_or(0, |r| r.u.len());
        let p = first.map_or(0, |r| r.y.len());
        let rows = first.map_or(0, |r| r.violations.len());
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=p).map(|i| format!("y{i}")));
        header.extend((1..=p).map(|i| format!("r{i}")));
        header.push("stage_cost".into());
        header.extend((1..=rows).map(|i| format!("viol{i}")));
        wtr.write_record(&header)?;
        for (t, rec) in self.records.iter().enumerate() {
            let mut row = vec![rec.t.to_string()];
            row.extend(traj.x[t].iter().map(f64::to_string));
            row.extend(rec.u.iter().map(f64::to_string));
            row.extend(rec.y.iter().map(f64::to_string));
            row.extend(rec.r.iter().map(f64::to_string));
            row.push(rec.stage_cost.to_string());
            row.extend(rec.violations.iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Writes `trajectory.csv` and `report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("trajectory.csv"))?)?;
        save_json(&dir.join("report.json"), self)
    }
}

/// Runs one closed-loop experiment: the warmup inputs first, then the
/// controller. Infeasible control steps are handled by the controller's
/// fallback and show up in `control_steps`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let prep = cfg.prepare()?;
    let data = if cfg.controller.needs_data() {
        Some(collect_data(cfg, &prep)?)
    } else {
        None
    };
    let mut ctrl = build_controller(cfg, &prep, data.as_ref())?;
    let model = &prep.model;
    let (noise, x0) = realization(cfg, &prep);
    let warmup = &prep.warmup;

    let start = Instant::now();
    let traj = simulate_closed_loop::<_, HarnessError>(
        model,
        |t, y| {
            if let Some(u) = warmup.get(t) {
                ctrl.observe(t, y, u)?;
                Ok(u.clone())
            } else {
                Ok(ctrl.act(t, y)?)
            }
        },
        &x0,
        &noise,
        cfg.steps,
    )?;
    let wall_time = start.elapsed();

    let setup = &prep.setup;
    let spec = &setup.spec;
    let mut records = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (u, y) = (&traj.u[t], &traj.y[t]);
        let r = setup.refs.at(t);
        let e = y - r;
        let stage_cost = e.dot(&(&setup.q * &e)) + u.dot(&(&setup.r * u));
        let violations = (&spec.e_y * y - &spec.f_y).map(|v| v.max(0.0));
        records.push(StepReport {
            t,
            u: to_vec(u),
            y: to_vec(y),
            r: to_vec(r),
            stage_cost,
            violations: to_vec(&violations),
        });
    }

    let window = &records[prep.metrics_from..];
    let len = window.len() as f64;
    let q_y = spec.q_y();
    let mut row_counts = vec![0usize; q_y];
    let mut violation_count = 0;
    let mut total = 0.0;
    let mut cumulative_cost = 0.0;
    for rec in window {
        cumulative_cost += rec.stage_cost;
        let mut any = false;
        for (i, &v) in rec.violations.iter().enumerate() {
            if v > 0.0 {
                row_counts[i] += 1;
                any = true;
            }
            total += v;
        }
        violation_count += usize::from(any);
    }

    let log = ctrl.log();
    Ok(RunReport {
        controller: cfg.label.clone().unwrap_or_else(|| ctrl.name().to_string()),
        seed: cfg.seed,
        stream: cfg.stream,
        steps: cfg.steps,
        warmup: warmup.len(),
        metrics_from: prep.metrics_from,
        cumulative_cost,
        violation_count,
        violation_rate: violation_count as f64 / len,
        total_violation_amount: total,
        row_violation_rates: row_counts.iter().map(|&c| c as f64 / len).collect(),
        row_violation_counts: row_counts,
        ira_iterations: log.control_steps.iter().map(|c| c.iterations).collect(),
        fallback_count: log.fallback_count(),
        control_steps: log
            .control_steps
            .iter()
            .map(|c| ControlStepSummary {
                k: c.k,
                status: c.status,
                iterations: c.iterations,
                cost: c.cost,
                note: c.note.clone(),
            })
            .collect(),
        records,
        trajectory: traj,
        wall_time,
    })
}

/// `runs` independent runs of `cfg`; run `i` uses noise stream
/// `cfg.stream + i`. Runs execute in parallel and are returned in order.
pub fn run_sweep(cfg: &ExperimentConfig, runs: usize) -> Result<Vec<RunReport>, HarnessError> {
    cfg.prepare()?;
    (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.stream = cfg.stream + i;
            run_experiment(&c)
        })
        .collect()
}

/// One row per controller, averaged over its runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub controller: String,
    pub violation_rate: f64,
    pub total_violation_amount: f64,
    pub cumulative_cost: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub reports: Vec<Vec<RunReport>>,
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "controller",
            "violation_rate",
            "total_violation_amount",
            "cumulative_cost",
            "runs",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.controller.clone(),
                r.violation_rate.to_string(),
                r.total_violation_amount.to_string(),
                r.cumulative_cost.to_string(),
                r.runs.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes `comparison.csv` plus `run_<i>_<j>/` for controller `i`, run
    /// `j`.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("comparison.csv"))?)?;
        for (i, reports) in self.reports.iter().enumerate() {
            for (j, rep) in reports.iter().enumerate() {
                rep.save(&dir.join(format!("run_{i}_{j}")))?;
            }
        }
        Ok(())
    }
}

/// Runs every configuration `runs` times. All configurations must share
/// the plant, the run length, the seed, the stream, the initial-state
/// distribution and the warmup so the controllers face identical noise.
pub fn compare_controllers(
    cfgs: &[ExperimentConfig],
    runs: usize,
) -> Result<Comparison, HarnessError> {
    let first = cfgs
        .first()
        .ok_or_else(|| HarnessError::Config("no controllers to compare".into()))?;
    if runs == 0 {
        return Err(HarnessError::Config("runs must be positive".into()));
    }
    for c in cfgs {
        let shared = c.plant == first.plant
            && c.steps == first.steps
            && c.seed == first.seed
            && c.stream == first.stream
            && c.initial_state == first.initial_state
            && c.noise_free == first.noise_free
            && c.warmup_inputs == first.warmup_inputs;
        if !shared {
            return Err(HarnessError::Config(
                "compared runs must share plant, steps, seed, stream, initial state and warmup"
                    .into(),
            ));
        }
    }
    let reports = cfgs
        .par_iter()
        .map(|c| run_sweep(c, runs))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = reports
        .iter()
        .map(|reps| {
            let k = reps.len() as f64;
            let mean = |f: fn(&RunReport) -> f64| reps.iter().map(f).sum::<f64>() / k;
            ComparisonRow {
                controller: reps[0].controller.clone(),
                violation_rate: mean(|r| r.violation_rate),
                total_violation_amount: mean(|r| r.total_violation_amount),
                cumulative_cost: mean(|r| r.cumulative_cost),
                runs: reps.len(),
            }
        })
        .collect();
    Ok(Comparison { rows, reports })
}
