//! JSON experiment configuration. Matrices are nested row arrays.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::chance::{IraSettings, PolytopeSpec};
use crate::controllers::{FallbackPolicy, HorizonConfig, PredictiveSetup, ReferenceSchedule};
use crate::estimation::GaussianBelief;
use crate::plant::{random_minimal_system, LtiModel};

/// Row-major matrix, one inner array per row.
pub type Rows = Vec<Vec<f64>>;

pub(crate) fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>, HarnessError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::Config(format!(
            "{name} must be a non-empty rectangular array of rows"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HarnessError::Config(format!(
            "{name} has non-finite entries"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub(crate) fn vector(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>, HarnessError> {
    if v.len() != len || v.iter().any(|x| !x.is_finite()) {
        return Err(HarnessError::Config(format!(
            "{name} must hold {len} finite numbers"
        )));
    }
    Ok(DVector::from_column_slice(v))
}

fn sized(name: &str, rows: &Rows, shape: (usize, usize)) -> Result<DMatrix<f64>, HarnessError> {
    let m = matrix(name, rows)?;
    if m.shape() != shape {
        return Err(HarnessError::Config(format!(
            "{name} is {}x{}, expected {}x{}",
            m.nrows(),
            m.ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixPlant {
    pub a: Rows,
    pub b: Rows,
    pub c: Rows,
    pub sigma_w: Rows,
    pub sigma_v: Rows,
}

/// A random minimal system drawn from `seed`, with `Σ^w = sigma_w·I` and
/// `Σ^v = sigma_v·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPlant {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
}

fn default_radius() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantSpec {
    Matrices(MatrixPlant),
    Random(RandomPlant),
}

impl PlantSpec {
    pub fn build(&self) -> Result<LtiModel, HarnessError> {
        match self {
            PlantSpec::Matrices(mp) => {
                let a = matrix("plant.a", &mp.a)?;
                let b = matrix("plant.b", &mp.b)?;
                let c = matrix("plant.c", &mp.c)?;
                let sw = matrix("plant.sigma_w", &mp.sigma_w)?;
                let sv = matrix("plant.sigma_v", &mp.sigma_v)?;
                LtiModel::new(a, b, c, sw, sv).map_err(|e| HarnessError::Config(e.to_string()))
            }
            PlantSpec::Random(rp) => {
                let ok = rp.n > 0
                    && rp.m > 0
                    && rp.p > 0
                    && rp.radius > 0.0
                    && rp.radius.is_finite()
                    && rp.sigma_w >= 0.0
                    && rp.sigma_v > 0.0;
                if !ok {
                    return Err(HarnessError::Config(
                        "random plant needs positive dimensions and radius, sigma_w >= 0 and sigma_v > 0".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
                Ok(random_minimal_system(
                    &mut rng, rp.n, rp.m, rp.p, rp.radius, rp.sigma_w, rp.sigma_v,
                ))
            }
        }
    }
}

/// Symmetric boxes `|u_j| ≤ u_max`, `|y_j| ≤ y_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConstraints {
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    #[serde(default = "default_y_max")]
    pub y_max: f64,
    #[serde(default = "default_risk")]
    pub p_u: f64,
    #[serde(default = "default_risk")]
    pub p_y: f64,
}

fn default_u_max() -> f64 {
    0.6
}

fn default_y_max() -> f64 {
    0.4
}

fn default_risk() -> f64 {
    0.2
}

impl Default for BoxConstraints {
    fn default() -> Self {
        Self {
            u_max: default_u_max(),
            y_max: default_y_max(),
            p_u: default_risk(),
            p_y: default_risk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeConstraints {
    pub e_u: Rows,
    pub f_u: Vec<f64>,
    pub e_y: Rows,
    pub f_y: Vec<f64>,
    #[serde(default = "default_risk")]
    pub p_u: f64,
    #[serde(default = "default_risk")]
    pub p_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSpec {
    #[serde(rename = "box")]
    Boxes(BoxConstraints),
    Polytope(PolytopeConstraints),
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        ConstraintSpec::Boxes(BoxConstraints::default())
    }
}

impl ConstraintSpec {
    pub fn build(&self, m: usize, p: usize) -> Result<PolytopeSpec, HarnessError> {
        let spec = match self {
            ConstraintSpec::Boxes(b) => PolytopeSpec::boxes(m, p, b.u_max, b.y_max, b.p_u, b.p_y),
            ConstraintSpec::Polytope(pc) => {
                let e_u = matrix("constraints.e_u", &pc.e_u)?;
                let e_y = matrix("constraints.e_y", &pc.e_y)?;
                if e_u.ncols() != m || e_y.ncols() != p {
                    return Err(HarnessError::Config(format!(
                        "E_u needs {m} columns and E_y {p}"
                    )));
                }
                let f_u = vector("constraints.f_u", &pc.f_u, e_u.nrows())?;
                let f_y = vector("constraints.f_y", &pc.f_y, e_y.nrows())?;
                PolytopeSpec::new(e_u, f_u, e_y, f_y, pc.p_u, pc.p_y)
            }
        };
        spec.map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Tracking weights; `Q = 10⁴ I_p` and `R = I_m` when omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Option<Rows>,
    pub r: Option<Rows>,
}

impl CostSpec {
    pub fn build(&self, m: usize, p: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), HarnessError> {
        let q = match &self.q {
            Some(rows) => sized("cost.q", rows, (p, p))?,
            None => DMatrix::identity(p, p) * 1e4,
        };
        let r = match &self.r {
            Some(rows) => sized("cost.r", rows, (m, m))?,
            None => DMatrix::identity(m, m),
        };
        Ok((q, r))
    }
}

/// Reference value `r` held from time `t` until the next segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSegment {
    pub t: usize,
    pub r: Vec<f64>,
}

/// Gaussian distribution given by mean and covariance; zero when omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefSpec {
    pub mean: Option<Vec<f64>>,
    pub cov: Option<Rows>,
}

impl BeliefSpec {
    pub fn build(&self, name: &str, dim: usize) -> Result<GaussianBelief, HarnessError> {
        let mean = match &self.mean {
            Some(v) => vector(&format!("{name}.mean"), v, dim)?,
            None => DVector::zeros(dim),
        };
        let cov = match &self.cov {
            Some(rows) => sized(&format!("{name}.cov"), rows, (dim, dim))?,
            None => DMatrix::zeros(dim, dim),
        };
        GaussianBelief::new(mean, cov).map_err(|e| HarnessError::Config(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SddpcSpec {
    /// Ridge parameter of the predictor recovery; `0` selects the
    /// pseudoinverse.
    #[serde(default = "default_ridge")]
    pub lambda: f64,
    /// `pL × pL`; `10⁻⁴ I` when omitted.
    pub sigma_rho: Option<Rows>,
    /// Defaults to the plant's measurement-noise covariance.
    pub sigma_v: Option<Rows>,
    /// Prior on the auxiliary state. When omitted the mean is zero and the
    /// covariance is zero except `I_L ⊗ Σ^ρ` on the noise-response block.
    pub prior: Option<BeliefSpec>,
}

impl Default for SddpcSpec {
    fn default() -> Self {
        Self {
            lambda: default_ridge(),
            sigma_rho: None,
            sigma_v: None,
            prior: None,
        }
    }
}

fn default_ridge() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepcSpec {
    #[serde(default = "default_lambda_y")]
    pub lambda_y: f64,
    #[serde(default = "default_lambda_g")]
    pub lambda_g: f64,
}

fn default_lambda_y() -> f64 {
    1e6
}

fn default_lambda_g() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpcSpec {
    #[serde(default = "default_ridge")]
    pub lambda: f64,
}

/// Controller selection. SMPC and MPC receive the true plant model and the
/// initial-state distribution as their prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    Smpc,
    Mpc,
    Sddpc(SddpcSpec),
    Deepc(DeepcSpec),
    Spc(SpcSpec),
}

impl ControllerSpec {
    pub fn needs_data(&self) -> bool {
        matches!(
            self,
            ControllerSpec::Sddpc(_) | ControllerSpec::Deepc(_) | ControllerSpec::Spc(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IraSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_alpha() -> f64 {
    0.7
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    50
}

impl Default for IraSpec {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            max_iter: default_max_iter(),
        }
    }
}

/// Offline data: read from `csv` when given, otherwise recorded from the
/// plant at rest under i.i.d. Gaussian inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSpec {
    #[serde(default = "default_offline_len")]
    pub length: usize,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
    #[serde(default = "default_true")]
    pub noisy: bool,
    pub csv: Option<PathBuf>,
}

fn default_offline_len() -> usize {
    1000
}

fn default_input_std() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for OfflineSpec {
    fn default() -> Self {
        Self {
            length: default_offline_len(),
            input_std: default_input_std(),
            noisy: true,
            csv: None,
        }
    }
}

/// Settings of the model-based versus data-driven comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceSpec {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Replaces the matched `Σ^ρ = 𝒪Σ^w𝒪ᵀ`, e.g. to confirm that a
    /// mismatch is detected.
    pub sigma_rho: Option<Rows>,
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
            sigma_rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row name in comparison tables; the controller name when omitted.
    #[serde(default)]
    pub label: Option<String>,
    pub plant: PlantSpec,
    pub horizons: HorizonConfig,
    #[serde(default)]
    pub constraints: ConstraintSpec,
    #[serde(default)]
    pub cost: CostSpec,
    /// Piecewise-constant reference; zero when empty.
    #[serde(default)]
    pub reference: Vec<ReferenceSegment>,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub ira: IraSpec,
    #[serde(default)]
    pub offline: OfflineSpec,
    /// Total number of steps, warmup included.
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Noise stream of this run; sweeps assign `stream + i` to run `i`.
    #[serde(default)]
    pub stream: u64,
    /// Inputs applied open loop before the controller takes over.
    #[serde(default)]
    pub warmup_inputs: Vec<Vec<f64>>,
    /// Run the plant without noise (and from the initial-state mean) while
    /// the controllers keep the configured covariances.
    #[serde(default)]
    pub noise_free: bool,
    /// Distribution the initial state is drawn from.
    #[serde(default)]
    pub initial_state: BeliefSpec,
    /// First step counted in the metrics; the end of the warmup when
    /// omitted.
    #[serde(default)]
    pub metrics_from: Option<usize>,
    #[serde(default)]
    pub equivalence: EquivalenceSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A configuration resolved into model-level objects.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: LtiModel,
    pub setup: PredictiveSetup,
    pub initial: GaussianBelief,
    pub warmup: Vec<DVector<f64>>,
    pub metrics_from: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A JSON array of configurations.
    pub fn load_list(path: &std::path::Path) -> Result<Vec<Self>, HarnessError> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Checks every precondition that does not need offline data.
    pub fn prepare(&self) -> Result<Prepared, HarnessError> {
        let model = self.plant.build()?;
        let (m, p) = (model.m(), model.p());
        let h = self.horizons;
        let horizons =
            HorizonConfig::new(h.l, h.n, h.n_c).map_err(|e| HarnessError::Config(e.to_string()))?;
        let spec = self.constraints.build(m, p)?;
        let (q, r) = self.cost.build(m, p)?;
        let refs = if self.reference.is_empty() {
            ReferenceSchedule::constant(DVector::zeros(p))
        } else {
            let segs = self
                .reference
                .iter()
                .map(|s| Ok((s.t, vector("reference.r", &s.r, p)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            ReferenceSchedule::piecewise(segs).map_err(|e| HarnessError::Config(e.to_string()))?
        };
        let ira = &self.ira;
        if !(ira.alpha > 0.0 && ira.alpha < 1.0 && ira.epsilon > 0.0 && ira.max_iter > 0) {
            return Err(HarnessError::Config(
                "ira needs 0 < alpha < 1, epsilon > 0 and max_iter >= 1".into(),
            ));
        }
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be positive".into()));
        }
        if self.warmup_inputs.len() > self.steps {
            return Err(HarnessError::Config("warmup is longer than the run".into()));
        }
        let warmup = self
            .warmup_inputs
            .iter()
            .map(|u| vector("warmup_inputs", u, m))
            .collect::<Result<Vec<_>, _>>()?;
        let metrics_from = self.metrics_from.unwrap_or(warmup.len());
        if metrics_from >= self.steps {
            return Err(HarnessError::Config(
                "metrics_from must lie inside the run".into(),
            ));
        }
        let initial = self.initial_state.build("initial_state", model.n())?;
        if self.controller.needs_data() && self.offline.csv.is_none() {
            let o = &self.offline;
            if !(o.input_std > 0.0 && o.input_std.is_finite()) {
                return Err(HarnessError::Config(
                    "offline.input_std must be positive".into(),
                ));
            }
        }
        let mut setup = PredictiveSetup::new(horizons, spec, q, r, refs);
        setup.ira = IraSettings {
            alpha: ira.alpha,
            epsilon: ira.epsilon,
            max_iter: ira.max_iter,
        };
        setup.fallback = FallbackPolicy::HoldLastPlan;
        setup
            .validate(m, p)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Prepared {
            model,
            setup,
            initial,
            warmup,
            metrics_from,
        })
    }
}
