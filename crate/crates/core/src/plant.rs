//! Stochastic LTI plant: simulation, noise sampling and structural checks.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::linalg::{
    hstack, min_symmetric_eigenvalue, psd_factor, rank, spectral_radius, symmetrize, vstack,
};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("{context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{0} is not a valid covariance: {1}")]
    InvalidCovariance(&'static str, String),
    #[error("noise realization covers {available} steps, {needed} requested")]
    NoiseTooShort { available: usize, needed: usize },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for PlantError {
    fn from(e: csv::Error) -> Self {
        PlantError::Csv(e.to_string())
    }
}

/// `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t + v_t` with
/// `w ~ N(0, Σ^w)` and `v ~ N(0, Σ^v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
}

impl LtiModel {
    /// Validates dimensions and covariances. `Σ^w` may be singular (small
    /// negative eigenvalues down to −1e-12 are clamped away), `Σ^v` must be
    /// positive definite.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        sigma_v: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        let m = b.ncols();
        let p = c.nrows();
        check_shape("A", &a, (n, n))?;
        check_shape("B", &b, (n, m))?;
        check_shape("C", &c, (p, n))?;
        check_shape("Sigma_w", &sigma_w, (n, n))?;
        check_shape("Sigma_v", &sigma_v, (p, p))?;
        if n == 0 || m == 0 || p == 0 {
            return Err(PlantError::DimensionMismatch {
                context: "model dimensions must be positive",
                expected: (1, 1),
                found: (n, m.min(p)),
            });
        }
        for (name, mat) in [
            ("A", &a),
            ("B", &b),
            ("C", &c),
            ("Sigma_w", &sigma_w),
            ("Sigma_v", &sigma_v),
        ] {
            if !mat.iter().all(|v| v.is_finite()) {
                return Err(PlantError::NonFinite(name));
            }
        }
        let sigma_w = clamp_psd("Sigma_w", &sigma_w)?;
        let sigma_v = symmetrize(&sigma_v);
        check_symmetric("Sigma_v", &sigma_v)?;
        if sigma_v.clone().cholesky().is_none() {
            return Err(PlantError::InvalidCovariance(
                "Sigma_v",
                "not positive definite".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            c,
            sigma_w,
            sigma_v,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `A x + B u + w`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>, PlantError> {
        check_len("step: x", x, self.n())?;
        check_len("step: u", u, self.m())?;
        check_len("step: w", w, self.n())?;
        Ok(&self.a * x + &self.b * u + w)
    }

    /// `C x + v`.
    pub fn output(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        check_len("output: x", x, self.n())?;
        check_len("output: v", v, self.p())?;
        Ok(&self.c * x + v)
    }

    /// `col(C, CA, …, CA^{L−1})`.
    pub fn extended_observability(&self, l: usize) -> DMatrix<f64> {
        extended_observability(&self.a, &self.c, l)
    }

    /// `[A^{L−1}B, …, AB, B]`.
    pub fn extended_controllability(&self, l: usize) -> DMatrix<f64> {
        extended_controllability(&self.a, &self.b, l)
    }

    pub fn check_assumption_dims(&self, l: usize) -> AssumptionReport {
        let n = self.n();
        AssumptionReport {
            n,
            l,
            observability_rank: rank(&self.extended_observability(l)),
            controllability_rank: rank(&self.extended_controllability(l)),
            observable: rank(&self.extended_observability(n)) == n,
            controllable: rank(&self.extended_controllability(n)) == n,
        }
    }

    /// Smallest `L` for which the extended observability matrix has full
    /// column rank and the extended controllability matrix full row rank.
    pub fn minimal_horizon(&self) -> Option<usize> {
        (1..=self.n()).find(|&l| self.check_assumption_dims(l).holds())
    }
}

fn check_shape(
    context: &'static str,
    m: &DMatrix<f64>,
    expected: (usize, usize),
) -> Result<(), PlantError> {
    if m.shape() != expected {
        return Err(PlantError::DimensionMismatch {
            context,
            expected,
            found: m.shape(),
        });
    }
    Ok(())
}

fn check_len(context: &'static str, v: &DVector<f64>, len: usize) -> Result<(), PlantError> {
    if v.len() != len {
        return Err(PlantError::DimensionMismatch {
            context,
            expected: (len, 1),
            found: (v.len(), 1),
        });
    }
    Ok(())
}

fn check_symmetric(name: &'static str, s: &DMatrix<f64>) -> Result<(), PlantError> {
    let asym = crate::numerics::linalg::asymmetry(s);
    if asym > 1e-9 * (1.0 + s.amax()) {
        return Err(PlantError::InvalidCovariance(
            name,
            format!("asymmetry {asym:e}"),
        ));
    }
    Ok(())
}

// Symmetrizes and, if needed, clamps tiny negative eigenvalues to zero.
pub(crate) fn clamp_psd(name: &'static str, s: &DMatrix<f64>) -> Result<DMatrix<f64>, PlantError> {
    check_symmetric(name, s)?;
    let sym = symmetrize(s);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let min_eig = min_symmetric_eigenvalue(&sym);
    if min_eig >= 0.0 {
        return Ok(sym);
    }
    if min_eig < -1e-12 * (1.0 + sym.amax()) {
        return Err(PlantError::InvalidCovariance(
            name,
            format!("eigenvalue {min_eig:e}"),
        ));
    }
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(symmetrize(
        &(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()),
    ))
}

pub fn extended_observability(a: &DMatrix<f64>, c: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let mut blocks = Vec::with_capacity(l);
    let mut block = c.clone();
    for _ in 0..l {
        let next = &block * a;
        blocks.push(block);
        block = next;
    }
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    vstack(&refs)
}

pub fn extended_controllability(a: &DMatrix<f64>, b: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let mut blocks = Vec::with_capacity(l);
    let mut block = b.clone();
    for _ in 0..l {
        let next = a * &block;
        blocks.push(block);
        block = next;
    }
    blocks.reverse();
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    hstack(&refs)
}

/// Rank diagnostics for a chosen initial-condition horizon `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssumptionReport {
    pub n: usize,
    pub l: usize,
    pub observability_rank: usize,
    pub controllability_rank: usize,
    pub observable: bool,
    pub controllable: bool,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        self.deficiencies().is_empty()
    }

    pub fn deficiencies(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.observable {
            out.push("(A, C) is not observable".to_string());
        }
        if !self.controllable {
            out.push("(A, B) is not controllable".to_string());
        }
        if self.observability_rank < self.n {
            out.push(format!(
                "extended observability matrix has rank {} < n = {} at L = {}",
                self.observability_rank, self.n, self.l
            ));
        }
        if self.controllability_rank < self.n {
            out.push(format!(
                "extended controllability matrix has rank {} < n = {} at L = {}",
                self.controllability_rank, self.n, self.l
            ));
        }
        out
    }
}

/// Process and measurement noise sequences for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub seed: u64,
    pub stream: u64,
}

impl NoiseRealization {
    pub fn len(&self) -> usize {
        self.w.len().min(self.v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All-zero noise of the given length.
    pub fn zeros(n: usize, p: usize, horizon: usize) -> Self {
        Self {
            w: vec![DVector::zeros(n); horizon],
            v: vec![DVector::zeros(p); horizon],
            seed: 0,
            stream: 0,
        }
    }
}

/// Counter-based generator positioned at time step `t` of `(seed, stream)`.
///
/// Each step owns a disjoint block of 2¹⁶ keystream words, so the draws at
/// step `t` do not depend on how many draws earlier steps consumed.
pub fn step_rng(seed: u64, stream: u64, t: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((t as u128) << 16);
    rng
}

pub fn standard_normal_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Stream 0 of [`sample_noise_stream`].
pub fn sample_noise(model: &LtiModel, horizon: usize, seed: u64) -> NoiseRealization {
    sample_noise_stream(model, horizon, seed, 0)
}

/// Draws `w_t ~ N(0, Σ^w)`, `v_t ~ N(0, Σ^v)` for `t < horizon` by applying
/// spectral square roots to standard normals.
pub fn sample_noise_stream(
    model: &LtiModel,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> NoiseRealization {
    let fw = psd_factor(&model.sigma_w);
    let fv = psd_factor(&model.sigma_v);
    let (n, p) = (model.n(), model.p());
    let mut w = Vec::with_capacity(horizon);
    let mut v = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut rng = step_rng(seed, stream, t);
        let z = standard_normal_vector(&mut rng, n + p);
        w.push(&fw * z.rows(0, n));
        v.push(&fv * z.rows(n, p));
    }
    NoiseRealization { w, v, seed, stream }
}

/// State, input and output sequences of a run; `x` has one more entry than
/// `u` and `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: usize,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Largest absolute residual of the plant equations against the noise
    /// that produced the trajectory.
    pub fn replay_residual(&self, model: &LtiModel, noise: &NoiseRealization) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.len() {
            let x_next = &model.a * &self.x[t] + &model.b * &self.u[t] + &noise.w[t];
            let y = &model.c * &self.x[t] + &noise.v[t];
            worst = worst
                .max((x_next - &self.x[t + 1]).amax())
                .max((y - &self.y[t]).amax());
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PlantError> {
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.u.first().map_or(0, |u| u.len());
        let p = self.y.first().map_or(0, |y| y.len());
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=p).map(|i| format!("y{i}")));
        wtr.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![(self.t0 + t).to_string()];
            row.extend(self.x[t].iter().map(|v| v.to_string()));
            row.extend(self.u[t].iter().map(|v| v.to_string()));
            row.extend(self.y[t].iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), PlantError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Input and output columns of a trajectory CSV (state columns optional and
/// ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct IoRecord {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

pub fn read_io_csv<R: Read>(input: R) -> Result<IoRecord, PlantError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let column = |prefix: char| -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(j, h)| {
                let h = h.trim();
                let idx = h.strip_prefix(prefix)?.parse::<usize>().ok()?;
                Some((idx, j))
            })
            .collect();
        cols.sort();
        cols.into_iter().map(|(_, j)| j).collect()
    };
    let u_cols = column('u');
    let y_cols = column('y');
    if u_cols.is_empty() || y_cols.is_empty() {
        return Err(PlantError::Csv("header needs u1.. and y1.. columns".into()));
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64, PlantError> {
            rec.get(j)
                .ok_or_else(|| PlantError::Csv("short row".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| PlantError::Csv(e.to_string()))
        };
        u.push(DVector::from_vec(
            u_cols.iter().map(|&j| parse(j)).collect::<Result<_, _>>()?,
        ));
        y.push(DVector::from_vec(
            y_cols.iter().map(|&j| parse(j)).collect::<Result<_, _>>()?,
        ));
    }
    Ok(IoRecord { u, y })
}

pub fn load_io_csv(path: &Path) -> Result<IoRecord, PlantError> {
    read_io_csv(std::fs::File::open(path)?)
}

/// Runs the loop `y_t = C x_t + v_t → u_t = controller(t, y_t) →
/// x_{t+1} = A x_t + B u_t + w_t` for `steps` steps.
pub fn simulate_closed_loop<F, E>(
    model: &LtiModel,
    mut controller: F,
    x0: &DVector<f64>,
    noise: &NoiseRealization,
    steps: usize,
) -> Result<Trajectory, E>
where
    F: FnMut(usize, &DVector<f64>) -> Result<DVector<f64>, E>,
    E: From<PlantError>,
{
    if noise.len() < steps {
        return Err(PlantError::NoiseTooShort {
            available: noise.len(),
            needed: steps,
        }
        .into());
    }
    check_len("simulate_closed_loop: x0", x0, model.n())?;
    let mut x = Vec::with_capacity(steps + 1);
    let mut u = Vec::with_capacity(steps);
    let mut y = Vec::with_capacity(steps);
    x.push(x0.clone());
    for t in 0..steps {
        let yt = model.output(&x[t], &noise.v[t])?;
        let ut = controller(t, &yt)?;
        let next = model.step(&x[t], &ut, &noise.w[t])?;
        y.push(yt);
        u.push(ut);
        x.push(next);
    }
    Ok(Trajectory { t0: 0, x, u, y })
}

/// Random minimal system with `A` scaled to the given spectral radius.
/// Noise covariances are set to `sw·I` and `sv·I`.
pub fn random_minimal_system<R: Rng>(
    rng: &mut R,
    n: usize,
    m: usize,
    p: usize,
    radius: f64,
    sw: f64,
    sv: f64,
) -> LtiModel {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rho = spectral_radius(&a);
        if rho < 1e-3 {
            continue;
        }
        let a = a * (radius / rho);
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let model = LtiModel::new(
            a,
            b,
            c,
            DMatrix::identity(n, n) * sw,
            DMatrix::identity(p, p) * sv,
        )
        .expect("generated model is well formed");
        let report = model.check_assumption_dims(n);
        if report.observable && report.controllable && well_conditioned(&model) {
            return model;
        }
    }
}

// Rejects systems that are minimal only up to rounding.
fn well_conditioned(model: &LtiModel) -> bool {
    let n = model.n();
    let smallest = |m: DMatrix<f64>| {
        let sv = crate::numerics::linalg::thin_svd(&m).s;
        sv.min() / sv.max()
    };
    smallest(model.extended_observability(n)) > 1e-3
        && smallest(model.extended_controllability(n)) > 1e-3
}
