//! Quantities built from offline input-output data: block-Hankel
//! partitioning, recovery of the multi-step predictors, and the auxiliary
//! state-space model that SDDPC runs on.
//!
//! Nothing outside [`oracles`] touches the true plant matrices.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::linalg::{hstack, pinv, rank, tikhonov_solve, vstack};
use crate::numerics::NumericsError;
use crate::plant::{
    sample_noise_stream, simulate_closed_loop, standard_normal_vector, step_rng, LtiModel,
    NoiseRealization, PlantError,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sequence of length {len} is too short for depth {depth}")]
    TooShort { len: usize, depth: usize },
    #[error("inconsistent sample dimensions: {0}")]
    Inconsistent(String),
    #[error("horizon L must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// A recorded input-output trajectory `u^d_{[1,T_d]}`, `y^d_{[1,T_d]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineData {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl OfflineData {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>) -> Result<Self, DataError> {
        if u.len() != y.len() {
            return Err(DataError::Inconsistent(format!(
                "{} inputs vs {} outputs",
                u.len(),
                y.len()
            )));
        }
        check_uniform(&u, "input")?;
        check_uniform(&y, "output")?;
        Ok(Self { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn m(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    pub fn p(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }
}

fn check_uniform(seq: &[DVector<f64>], what: &str) -> Result<(), DataError> {
    if let Some(first) = seq.first() {
        let d = first.len();
        if d == 0 || seq.iter().any(|v| v.len() != d) {
            return Err(DataError::Inconsistent(format!(
                "{what} samples must share a positive dimension"
            )));
        }
        if seq.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(DataError::Inconsistent(format!("non-finite {what} sample")));
        }
    }
    Ok(())
}

/// Depth-`depth` block-Hankel matrix whose block `(i, j)` is `seq[i + j]`.
pub fn hankel(seq: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>, DataError> {
    if depth == 0 || seq.len() < depth {
        return Err(DataError::TooShort {
            len: seq.len(),
            depth,
        });
    }
    check_uniform(seq, "hankel")?;
    let d = seq[0].len();
    let width = seq.len() - depth + 1;
    let mut out = DMatrix::zeros(depth * d, width);
    for j in 0..width {
        for i in 0..depth {
            out.view_mut((i * d, j), (d, 1)).copy_from(&seq[i + j]);
        }
    }
    Ok(out)
}

/// Whether the depth-`order` Hankel matrix of `u` has full row rank.
/// Sequences too short to build a square-or-wider Hankel matrix are not
/// persistently exciting.
pub fn is_persistently_exciting(u: &[DVector<f64>], order: usize) -> bool {
    match hankel(u, order) {
        Ok(h) if h.ncols() >= h.nrows() => rank(&h) == h.nrows(),
        _ => false,
    }
}

/// Past/future blocks of the depth-`2L` Hankel matrices of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    pub y1: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub l: usize,
    pub m: usize,
    pub p: usize,
}

impl DataMatrices {
    /// Common column count `T_d − 2L + 1`.
    pub fn width(&self) -> usize {
        self.u1.ncols()
    }
}

pub fn partition(data: &OfflineData, l: usize) -> Result<DataMatrices, DataError> {
    if l == 0 {
        return Err(DataError::ZeroHorizon);
    }
    let hu = hankel(&data.u, 2 * l)?;
    let hy = hankel(&data.y, 2 * l)?;
    let (m, p) = (data.m(), data.p());
    Ok(DataMatrices {
        u1: hu.rows(0, m * l).into_owned(),
        u2: hu.rows(m * l, m * l).into_owned(),
        y1: hy.rows(0, p * l).into_owned(),
        y2: hy.rows(p * l, p * l).into_owned(),
        l,
        m,
        p,
    })
}

/// How the predictor `𝒫 = Y₂ · col(U₁, Y₁, U₂)†` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecoveryMode {
    /// Pseudoinverse. Exact on noise-free, sufficiently exciting data.
    Exact,
    /// Ridge-regularized inverse with the given λ, for noisy data.
    Tikhonov(f64),
}

/// Multi-step predictor blocks recovered from data.
///
/// Noise-free future outputs satisfy
/// `y_{[t,t+L)} = Γ_U u_{[t−L,t)} + Γ_Y y_{[t−L,t)} + G u_{[t,t+L)}`, and
/// `H` maps past inputs to future outputs when the past outputs are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredQuantities {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub gamma_u: DMatrix<f64>,
    pub gamma_y: DMatrix<f64>,
    pub gamma1_u: DMatrix<f64>,
    pub gamma1_y: DMatrix<f64>,
    pub l: usize,
    pub m: usize,
    pub p: usize,
}

impl RecoveredQuantities {
    /// `[Γ_U, Γ_Y]`.
    pub fn gamma(&self) -> DMatrix<f64> {
        hstack(&[&self.gamma_u, &self.gamma_y])
    }
}

pub fn recover_quantities(
    dm: &DataMatrices,
    mode: RecoveryMode,
) -> Result<RecoveredQuantities, DataError> {
    let (l, m, p) = (dm.l, dm.m, dm.p);
    let w = vstack(&[&dm.u1, &dm.y1, &dm.u2]);
    let pred = match mode {
        RecoveryMode::Exact => &dm.y2 * pinv(&w),
        RecoveryMode::Tikhonov(lambda) => tikhonov_solve(&w, &dm.y2, lambda)?,
    };
    let p1 = pred.columns(0, m * l).into_owned();
    let p2 = pred.columns(m * l, p * l).into_owned();
    let p3 = pred.columns(m * l + p * l, m * l).into_owned();
    let h = &p1 + &p2 * &p3;
    Ok(RecoveredQuantities {
        gamma1_u: p1.rows(0, p).into_owned(),
        gamma1_y: p2.rows(0, p).into_owned(),
        g: p3,
        h,
        gamma_u: p1,
        gamma_y: p2,
        l,
        m,
        p,
    })
}

/// `S_j = [0, I_p, 0] ∈ ℝ^{p×pL}` with the identity in block `j` (1-based).
fn selector(p: usize, l: usize, j: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(p, p * l);
    s.view_mut((0, (j - 1) * p), (p, p)).fill_with_identity();
    s
}

/// Zero-one matrices `E ∈ ℝ^{pL×pL²}` and `F ∈ ℝ^{p×pL²}` extracting, from a
/// stacked window of `ρ`, the noise response seen by each past output and
/// by the next output.
pub fn selector_matrices(p: usize, l: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut stacked = DMatrix::zeros(p * (l + 1), p * l * l);
    for r in 1..=l {
        for c in 0..r {
            let s = selector(p, l, r - c);
            stacked
                .view_mut((r * p, c * p * l), (p, p * l))
                .copy_from(&s);
        }
    }
    let e = stacked.rows(0, p * l).into_owned();
    let f = stacked.rows(p * l, p).into_owned();
    (e, f)
}

/// State-space model on the auxiliary state
/// `x_t = col(u_{[t−L,t)}, y°_{[t−L,t)}, ρ_{[t−L,t)})`, driven by the
/// process-noise response `ρ_t` and observed through `C x_t + v_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxModel {
    pub model: LtiModel,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub l: usize,
    pub m: usize,
    pub p: usize,
}

impl AuxModel {
    /// `mL + pL + pL²`.
    pub fn n_aux(&self) -> usize {
        self.model.n()
    }

    /// Stacks the three windows into an auxiliary state. Each slice holds
    /// the `L` most recent samples, oldest first.
    pub fn state_from_windows(
        &self,
        u: &[DVector<f64>],
        y_clean: &[DVector<f64>],
        rho: &[DVector<f64>],
    ) -> Result<DVector<f64>, DataError> {
        let l = self.l;
        if u.len() != l || y_clean.len() != l || rho.len() != l {
            return Err(DataError::Inconsistent(format!(
                "windows must have length {l}"
            )));
        }
        let ok = u.iter().all(|v| v.len() == self.m)
            && y_clean.iter().all(|v| v.len() == self.p)
            && rho.iter().all(|v| v.len() == self.p * l);
        if !ok {
            return Err(DataError::Inconsistent("window sample dimension".into()));
        }
        let parts: Vec<&DVector<f64>> = u.iter().chain(y_clean).chain(rho).collect();
        Ok(crate::numerics::linalg::vcat(&parts))
    }
}

/// Assembles the auxiliary model from recovered predictors.
///
/// `sigma_rho` is the `pL×pL` covariance of `ρ_t` and becomes the trailing
/// block of the auxiliary process-noise covariance.
pub fn build_aux_model(
    rq: &RecoveredQuantities,
    sigma_rho: &DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
) -> Result<AuxModel, DataError> {
    let (l, m, p) = (rq.l, rq.m, rq.p);
    let (nu, ny, nr) = (m * l, p * l, p * l * l);
    let n = nu + ny + nr;
    if sigma_rho.shape() != (ny, ny) {
        return Err(DataError::Inconsistent(format!(
            "Sigma_rho is {:?}, expected {:?}",
            sigma_rho.shape(),
            (ny, ny)
        )));
    }
    let (e, f) = selector_matrices(p, l);
    let rho_row = &f - &rq.gamma1_y * &e;
    let c = hstack(&[&rq.gamma1_u, &rq.gamma1_y, &rho_row]);

    let mut a = DMatrix::zeros(n, n);
    // Each window shifts up by one sample.
    a.view_mut((0, m), (nu - m, nu - m)).fill_with_identity();
    a.view_mut((nu, nu + p), (ny - p, ny - p))
        .fill_with_identity();
    a.view_mut((nu + ny, nu + ny + ny), (nr - ny, nr - ny))
        .fill_with_identity();
    // The newest noise-free output is C x_t.
    a.view_mut((nu + ny - p, 0), (p, n)).copy_from(&c);

    let mut b = DMatrix::zeros(n, m);
    b.view_mut((nu - m, 0), (m, m)).fill_with_identity();

    let mut sigma_w = DMatrix::zeros(n, n);
    sigma_w
        .view_mut((n - ny, n - ny), (ny, ny))
        .copy_from(sigma_rho);

    let model = LtiModel::new(a, b, c, sigma_w, sigma_v.clone())?;
    Ok(AuxModel {
        model,
        e,
        f,
        l,
        m,
        p,
    })
}

/// Default `Σ^ρ = 10⁻⁴ I_{pL}` when the true process-noise covariance is
/// unknown.
pub fn default_sigma_rho(p: usize, l: usize) -> DMatrix<f64> {
    DMatrix::identity(p * l, p * l) * 1e-4
}

/// Records `t_d` samples from `model` under i.i.d. `N(0, input_std²)`
/// inputs, starting from the origin. With `noisy = false` the process and
/// measurement noise are zero.
pub fn collect_offline_data(
    model: &LtiModel,
    t_d: usize,
    input_std: f64,
    noisy: bool,
    seed: u64,
    stream: u64,
) -> Result<OfflineData, DataError> {
    let noise = if noisy {
        sample_noise_stream(model, t_d, seed, stream)
    } else {
        NoiseRealization::zeros(model.n(), model.p(), t_d)
    };
    // Inputs draw from a stream distinct from the noise.
    let input_stream = stream ^ (1 << 63);
    let m = model.m();
    let traj = simulate_closed_loop::<_, PlantError>(
        model,
        |t, _| {
            let mut rng = step_rng(seed, input_stream, t);
            Ok(standard_normal_vector(&mut rng, m) * input_std)
        },
        &DVector::zeros(model.n()),
        &noise,
        t_d,
    )?;
    OfflineData::new(traj.u, traj.y)
}

/// Model-based counterparts of the data-built quantities.
///
/// These functions take the true plant and exist to verify the data-driven
/// path (and to set the noise and prior parameters that make it match the
/// model-based controller exactly). The data-driven controllers never call
/// them.
pub mod oracles {
    use nalgebra::{DMatrix, DVector};

    use super::{DataError, RecoveredQuantities};
    use crate::estimation::GaussianBelief;
    use crate::numerics::linalg::{hstack, kron_identity, pinv, rank, symmetrize, vstack};
    use crate::plant::LtiModel;

    fn power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::identity(a.nrows(), a.ncols());
        for _ in 0..k {
            out = &out * a;
        }
        out
    }

    /// Strictly lower block-Toeplitz matrix with block `(i, j) = C A^{i−j−1} X`.
    fn toeplitz(model: &LtiModel, x: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
        let p = model.p();
        let k = x.ncols();
        let mut out = DMatrix::zeros(p * l, k * l);
        for i in 0..l {
            for j in 0..i {
                let blk = &model.c * power(&model.a, i - j - 1) * x;
                out.view_mut((i * p, j * k), (p, k)).copy_from(&blk);
            }
        }
        out
    }

    /// Input-to-output Toeplitz matrix `G`.
    pub fn g_matrix(model: &LtiModel, l: usize) -> DMatrix<f64> {
        toeplitz(model, &model.b, l)
    }

    /// Process-noise-to-output Toeplitz matrix `G_W`.
    pub fn g_w_matrix(model: &LtiModel, l: usize) -> DMatrix<f64> {
        toeplitz(model, &DMatrix::identity(model.n(), model.n()), l)
    }

    /// `H` with block `(i, j) = C A^{L−1+i−j} B`.
    pub fn h_matrix(model: &LtiModel, l: usize) -> DMatrix<f64> {
        let (p, m) = (model.p(), model.m());
        let mut out = DMatrix::zeros(p * l, m * l);
        for i in 0..l {
            for j in 0..l {
                let blk = &model.c * power(&model.a, l - 1 + i - j) * &model.b;
                out.view_mut((i * p, j * m), (p, m)).copy_from(&blk);
            }
        }
        out
    }

    /// `𝒞_W = [A^{L−1}, …, A, I]`.
    pub fn c_w_matrix(model: &LtiModel, l: usize) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = (0..l).map(|j| power(&model.a, l - 1 - j)).collect();
        let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
        hstack(&refs)
    }

    /// `[[I_{mL}, 0], [G, 𝒪]]`, the map from `(u_{[t−L,t)}, x_{t−L})` to
    /// the noise-free past window.
    fn past_map(model: &LtiModel, l: usize) -> DMatrix<f64> {
        let (n, m) = (model.n(), model.m());
        let top = hstack(&[&DMatrix::identity(m * l, m * l), &DMatrix::zeros(m * l, n)]);
        let bottom = hstack(&[&g_matrix(model, l), &model.extended_observability(l)]);
        vstack(&[&top, &bottom])
    }

    /// The predictor blocks computed from the model instead of data.
    pub fn model_quantities(model: &LtiModel, l: usize) -> RecoveredQuantities {
        let (m, p) = (model.m(), model.p());
        let obs = model.extended_observability(l);
        let al = power(&model.a, l);
        let h = h_matrix(model, l);
        let gamma = hstack(&[&h, &(&obs * &al)]) * pinv(&past_map(model, l));
        let gamma_u = gamma.columns(0, m * l).into_owned();
        let gamma_y = gamma.columns(m * l, p * l).into_owned();
        RecoveredQuantities {
            gamma1_u: gamma_u.rows(0, p).into_owned(),
            gamma1_y: gamma_y.rows(0, p).into_owned(),
            gamma_u,
            gamma_y,
            g: g_matrix(model, l),
            h,
            l,
            m,
            p,
        }
    }

    /// `Σ^ρ = 𝒪 Σ^w 𝒪ᵀ`.
    pub fn matched_sigma_rho(model: &LtiModel, l: usize) -> DMatrix<f64> {
        let obs = model.extended_observability(l);
        symmetrize(&(&obs * &model.sigma_w * obs.transpose()))
    }

    /// Linear maps tying the true state, the auxiliary state and the
    /// extended state `ξ_t = col(u_{[t−L,t)}, x_{t−L}, w_{[t−L,t)})`:
    /// `x_t = Φ x_aux`, `x_t = Φ_orig ξ_t`, `x_aux = Φ_aux ξ_t`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct PhiOracles {
        pub phi: DMatrix<f64>,
        pub phi_orig: DMatrix<f64>,
        pub phi_aux: DMatrix<f64>,
    }

    pub fn build_phi_oracles(model: &LtiModel, l: usize) -> PhiOracles {
        let (n, m) = (model.n(), model.m());
        let obs = model.extended_observability(l);
        let ctrb = model.extended_controllability(l);
        let al = power(&model.a, l);
        let c_w = c_w_matrix(model, l);
        let g = g_matrix(model, l);
        let g_w = g_w_matrix(model, l);

        let phi_uy = hstack(&[&ctrb, &al]) * pinv(&past_map(model, l));
        let phi_y = phi_uy.columns(m * l, phi_uy.ncols() - m * l).into_owned();
        let phi_w = &c_w - &phi_y * &g_w;
        let phi_rho = phi_w * kron_identity(l, &pinv(&obs));
        let phi = hstack(&[&phi_uy, &phi_rho]);

        let phi_orig = hstack(&[&ctrb, &al, &c_w]);
        let p = model.p();
        let (nu, ny, nr) = (m * l, p * l, p * l * l);
        let nxi = nu + n + n * l;
        let mut phi_aux = DMatrix::zeros(nu + ny + nr, nxi);
        phi_aux.view_mut((0, 0), (nu, nu)).fill_with_identity();
        phi_aux.view_mut((nu, 0), (ny, nu)).copy_from(&g);
        phi_aux.view_mut((nu, nu), (ny, n)).copy_from(&obs);
        phi_aux.view_mut((nu, nu + n), (ny, n * l)).copy_from(&g_w);
        phi_aux
            .view_mut((nu + ny, nu + n), (nr, n * l))
            .copy_from(&kron_identity(l, &obs));
        PhiOracles {
            phi,
            phi_orig,
            phi_aux,
        }
    }

    /// Auxiliary prior consistent with a prior on the true state: both are
    /// images of one Gaussian on the extended state.
    pub fn matched_prior(
        prior: &GaussianBelief,
        oracles: &PhiOracles,
    ) -> Result<GaussianBelief, DataError> {
        let n = oracles.phi_orig.nrows();
        if prior.dim() != n {
            return Err(DataError::Inconsistent(format!(
                "prior has dimension {}, expected {n}",
                prior.dim()
            )));
        }
        if rank(&oracles.phi_orig) < n {
            return Err(DataError::Inconsistent("Phi_orig is rank deficient".into()));
        }
        let inv = pinv(&oracles.phi_orig);
        let mean_xi: DVector<f64> = &inv * &prior.mean;
        let cov_xi = &inv * &prior.cov * inv.transpose();
        let mean = &oracles.phi_aux * mean_xi;
        let cov = symmetrize(&(&oracles.phi_aux * cov_xi * oracles.phi_aux.transpose()));
        Ok(GaussianBelief { mean, cov })
    }
}

#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use crate::estimation::GaussianBelief;
    use crate::numerics::linalg::{kron_identity, max_relative_deviation};
    use crate::plant::random_minimal_system;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalars(vals: &[f64]) -> Vec<DVector<f64>> {
        vals.iter().map(|&v| DVector::from_element(1, v)).collect()
    }

    fn scalar_model(a: f64) -> LtiModel {
        let s = |v| DMatrix::from_element(1, 1, v);
        LtiModel::new(s(a), s(1.0), s(1.0), s(0.01), s(0.01)).unwrap()
    }

    fn rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1.0)
    }

    #[test]
    fn hankel_scalar_definition() {
        let h = hankel(&scalars(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(
            h,
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0])
        );
        let single = hankel(&scalars(&[1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(single.shape(), (3, 1));
        assert!(hankel(&scalars(&[1.0]), 2).is_err());
    }

    #[test]
    fn hankel_vector_blocks_match_index_loop() {
        let seq: Vec<DVector<f64>> = (0..7)
            .map(|t| DVector::from_vec(vec![t as f64, 10.0 * t as f64 + 1.0]))
            .collect();
        let depth = 3;
        let h = hankel(&seq, depth).unwrap();
        assert_eq!(h.shape(), (6, 5));
        for row in 0..6 {
            for col in 0..5 {
                let sample = row / 2 + col;
                assert_eq!(h[(row, col)], seq[sample][row % 2]);
            }
        }
    }

    #[test]
    fn persistency_of_excitation() {
        assert!(!is_persistently_exciting(&scalars(&[1.0; 10]), 2));
        let mut impulse = vec![0.0; 8];
        impulse[0] = 1.0;
        assert!(!is_persistently_exciting(&scalars(&impulse), 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<DVector<f64>> = (0..200)
            .map(|_| standard_normal_vector(&mut rng, 1))
            .collect();
        assert!(is_persistently_exciting(&noise, 10));
    }

    #[test]
    fn partition_blocks() {
        let u = scalars(&(1..=8).map(|v| v as f64).collect::<Vec<_>>());
        let y = scalars(&(1..=8).map(|v| -(v as f64)).collect::<Vec<_>>());
        let data = OfflineData::new(u.clone(), y).unwrap();
        let dm = partition(&data, 2).unwrap();
        assert_eq!(dm.width(), 5);
        assert_eq!(
            dm.u1.row(0).iter().cloned().collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert_eq!(
            dm.u2.row(0).iter().cloned().collect::<Vec<_>>(),
            vec![3.0, 4.0, 5.0, 6.0, 7.0]
        );
        assert_eq!(vstack(&[&dm.u1, &dm.u2]), hankel(&u, 4).unwrap());

        let short = OfflineData::new(scalars(&[1.0, 2.0]), scalars(&[0.0, 0.0])).unwrap();
        assert_eq!(partition(&short, 1).unwrap().width(), 1);
    }

    #[test]
    fn scalar_recovery_matches_closed_form() {
        let model = scalar_model(0.5);
        let data = collect_offline_data(&model, 40, 1.0, false, 3, 0).unwrap();
        let rq = recover_quantities(&partition(&data, 1).unwrap(), RecoveryMode::Exact).unwrap();
        assert!(rq.g[(0, 0)].abs() < 1e-10);
        assert!((rq.h[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((rq.gamma_u[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((rq.gamma_y[(0, 0)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn recovery_matches_model_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..5 {
            let model = random_minimal_system(&mut rng, 2, 1, 1, 0.9, 0.01, 0.01);
            let l = 3;
            let data = collect_offline_data(&model, 80, 1.0, false, case, 0).unwrap();
            assert!(is_persistently_exciting(&data.u, 2 * l + 2));
            let rq =
                recover_quantities(&partition(&data, l).unwrap(), RecoveryMode::Exact).unwrap();
            let truth = model_quantities(&model, l);
            for (got, want) in [
                (&rq.g, &truth.g),
                (&rq.h, &truth.h),
                (&rq.gamma_u, &truth.gamma_u),
                (&rq.gamma_y, &truth.gamma_y),
                (&rq.gamma1_u, &truth.gamma1_u),
                (&rq.gamma1_y, &truth.gamma1_y),
            ] {
                assert!(max_relative_deviation(got, want) < 1e-7, "case {case}");
            }
        }
    }

    #[test]
    fn tikhonov_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = random_minimal_system(&mut rng, 2, 1, 1, 0.8, 0.01, 0.01);
        let data = collect_offline_data(&model, 200, 1.0, false, 1, 0).unwrap();
        let dm = partition(&data, 3).unwrap();
        let exact = recover_quantities(&dm, RecoveryMode::Exact).unwrap();
        let ridge = recover_quantities(&dm, RecoveryMode::Tikhonov(1e-3)).unwrap();
        assert!(rel_gap(&ridge.gamma(), &exact.gamma()) <= 1e-2);
        assert!(rel_gap(&ridge.g, &exact.g) <= 1e-2);
        assert!(recover_quantities(&dm, RecoveryMode::Tikhonov(0.0)).is_err());
    }

    #[test]
    fn aux_dimensions_and_sparsity() {
        let model = scalar_model(0.5);
        let l = 2;
        let rq = model_quantities(&model, l);
        let sigma_rho = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let aux = build_aux_model(&rq, &sigma_rho, &model.sigma_v).unwrap();
        assert_eq!(aux.n_aux(), 8);
        let b = &aux.model.b;
        assert_eq!(b.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(b[(1, 0)], 1.0);
        let sw = &aux.model.sigma_w;
        assert_eq!(sw.view((6, 6), (2, 2)).into_owned(), sigma_rho);
        assert_eq!(sw.iter().filter(|&&v| v != 0.0).count(), 4);
        assert!(build_aux_model(&rq, &DMatrix::identity(3, 3), &model.sigma_v).is_err());
    }

    #[test]
    fn selectors_match_entrywise_rule() {
        for (p, l) in [(1, 2), (2, 3), (1, 4)] {
            let (e, f) = selector_matrices(p, l);
            assert_eq!(e.shape(), (p * l, p * l * l));
            assert_eq!(f.shape(), (p, p * l * l));
            let stacked = vstack(&[&e, &f]);
            let mut want = DMatrix::zeros(p * (l + 1), p * l * l);
            for r in 0..=l {
                for c in 0..r {
                    for i in 0..p {
                        want[(r * p + i, c * p * l + (r - c - 1) * p + i)] = 1.0;
                    }
                }
            }
            assert_eq!(stacked, want);
        }
        let (e, f) = selector_matrices(1, 2);
        assert_eq!(
            e,
            DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(f, DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn selector_identities_with_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = random_minimal_system(&mut rng, 3, 2, 2, 0.9, 0.01, 0.01);
        let l = 3;
        let (e, f) = selector_matrices(2, l);
        let io = kron_identity(l, &model.extended_observability(l));
        assert!((&e * &io - g_w_matrix(&model, l)).amax() < 1e-12);
        assert!((&f * &io - &model.c * c_w_matrix(&model, l)).amax() < 1e-12);
    }

    struct Twin {
        x: Vec<DVector<f64>>,
        u: Vec<DVector<f64>>,
        y: Vec<DVector<f64>>,
        y_clean: Vec<DVector<f64>>,
        rho: Vec<DVector<f64>>,
        v: Vec<DVector<f64>>,
    }

    fn simulate_twin(model: &LtiModel, l: usize, steps: usize, seed: u64) -> Twin {
        let noise = sample_noise_stream(model, steps, seed, 0);
        let obs = model.extended_observability(l);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![standard_normal_vector(&mut rng, model.n())];
        let (mut u, mut y, mut y_clean, mut rho) = (vec![], vec![], vec![], vec![]);
        for t in 0..steps {
            let ut = standard_normal_vector(&mut rng, model.m());
            let yc = &model.c * &x[t];
            y.push(&yc + &noise.v[t]);
            y_clean.push(yc);
            rho.push(&obs * &noise.w[t]);
            x.push(model.step(&x[t], &ut, &noise.w[t]).unwrap());
            u.push(ut);
        }
        Twin {
            x,
            u,
            y,
            y_clean,
            rho,
            v: noise.v,
        }
    }

    #[test]
    fn aux_model_reproduces_outputs_and_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (n, m, p) in [(2, 1, 1), (3, 2, 2), (3, 1, 2)] {
            let model = random_minimal_system(&mut rng, n, m, p, 0.95, 0.1, 0.1);
            let l = model.minimal_horizon().unwrap().max(2);
            let data = collect_offline_data(&model, 150, 1.0, false, 2, 0).unwrap();
            let rq =
                recover_quantities(&partition(&data, l).unwrap(), RecoveryMode::Exact).unwrap();
            let aux = build_aux_model(&rq, &matched_sigma_rho(&model, l), &model.sigma_v).unwrap();
            let phi = build_phi_oracles(&model, l);
            let twin = simulate_twin(&model, l, 50 + l, 77);
            let state = |t: usize| {
                aux.state_from_windows(
                    &twin.u[t - l..t],
                    &twin.y_clean[t - l..t],
                    &twin.rho[t - l..t],
                )
                .unwrap()
            };
            for t in l..50 + l {
                let xb = state(t);
                let y_pred = &aux.model.c * &xb + &twin.v[t];
                assert!((&y_pred - &twin.y[t]).amax() < 1e-8 * (1.0 + twin.y[t].amax()));
                assert!((&phi.phi * &xb - &twin.x[t]).amax() < 1e-8 * (1.0 + twin.x[t].amax()));
                if t + 1 < 50 + l {
                    let mut w_bold = DVector::zeros(aux.n_aux());
                    let len = p * l;
                    w_bold
                        .rows_mut(aux.n_aux() - len, len)
                        .copy_from(&twin.rho[t]);
                    let next = aux.model.step(&xb, &twin.u[t], &w_bold).unwrap();
                    assert!((&next - state(t + 1)).amax() < 1e-8 * (1.0 + next.amax()));
                }
            }
        }
    }

    #[test]
    fn phi_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = random_minimal_system(&mut rng, 3, 1, 2, 0.9, 0.1, 0.1);
        let l = 3;
        let o = build_phi_oracles(&model, l);
        let n_aux = l + 2 * l + 2 * l * l;
        assert_eq!(o.phi.shape(), (3, n_aux));
        assert_eq!(o.phi_orig.shape(), (3, l + 3 * (l + 1)));
        assert!((&o.phi * &o.phi_aux - &o.phi_orig).amax() < 1e-9);
        let aux = build_aux_model(
            &model_quantities(&model, l),
            &matched_sigma_rho(&model, l),
            &model.sigma_v,
        )
        .unwrap();
        assert!((&model.c * &o.phi * &o.phi_aux - &aux.model.c * &o.phi_aux).amax() < 1e-8);
    }

    #[test]
    fn matched_prior_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = random_minimal_system(&mut rng, 2, 1, 1, 0.9, 0.1, 0.1);
        let o = build_phi_oracles(&model, 2);
        let zero = matched_prior(&GaussianBelief::zeros(2), &o).unwrap();
        assert_eq!(zero.mean.amax(), 0.0);
        assert_eq!(zero.cov.amax(), 0.0);

        let mean = DVector::from_vec(vec![0.3, -1.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let prior = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let bold = matched_prior(&prior, &o).unwrap();
        assert!((&o.phi * &bold.mean - &mean).amax() < 1e-8);
        assert!((&o.phi * &bold.cov * o.phi.transpose() - &cov).amax() < 1e-8);
        assert!(matched_prior(&GaussianBelief::zeros(3), &o).is_err());
    }
}
