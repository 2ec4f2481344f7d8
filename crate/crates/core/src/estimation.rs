//! Kalman filtering and closed-loop covariance propagation.
//!
//! Everything here is written against [`LtiModel`], so the same code serves
//! the true plant and the data-built auxiliary model.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::linalg::{min_symmetric_eigenvalue, symmetrize};
use crate::plant::LtiModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("{context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("innovation covariance at step {0} is not positive definite")]
    SingularInnovation(usize),
    #[error("belief covariance is not symmetric positive semidefinite ({0})")]
    InvalidBelief(String),
}

/// Gaussian belief `N(mean, cov)` over a state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, EstimationError> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(EstimationError::DimensionMismatch {
                context: "belief covariance",
                expected: (n, n),
                found: cov.shape(),
            });
        }
        let scale = 1.0 + cov.amax();
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(EstimationError::InvalidBelief(format!(
                "asymmetry {asym:e}"
            )));
        }
        let cov = symmetrize(&cov);
        if n > 0 {
            let min_eig = min_symmetric_eigenvalue(&cov);
            if min_eig < -1e-9 * scale {
                return Err(EstimationError::InvalidBelief(format!(
                    "eigenvalue {min_eig:e}"
                )));
            }
        }
        Ok(Self { mean, cov })
    }

    /// Point mass at the origin.
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Gains and covariances of the Kalman recursion over one prediction
/// horizon starting at the control step.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSchedule {
    /// `L_t`, one per step of the horizon.
    pub gains: Vec<DMatrix<f64>>,
    /// Posterior covariances `P_t`.
    pub p_post: Vec<DMatrix<f64>>,
    /// Prior covariances `P⁻_t`, one more than the horizon.
    pub p_prior: Vec<DMatrix<f64>>,
}

impl KalmanSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

/// Runs `L = P⁻Cᵀ(CP⁻Cᵀ + Σ^v)⁻¹`, `P = (I − LC)P⁻`,
/// `P⁻' = APAᵀ + Σ^w` for `horizon` steps from `P⁻ = prior_cov`.
pub fn kalman_schedule(
    model: &LtiModel,
    prior_cov: &DMatrix<f64>,
    horizon: usize,
) -> Result<KalmanSchedule, EstimationError> {
    let n = model.n();
    if prior_cov.shape() != (n, n) {
        return Err(EstimationError::DimensionMismatch {
            context: "kalman_schedule: prior covariance",
            expected: (n, n),
            found: prior_cov.shape(),
        });
    }
    let c = &model.c;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut gains = Vec::with_capacity(horizon);
    let mut p_post = Vec::with_capacity(horizon);
    let mut p_prior = Vec::with_capacity(horizon + 1);
    let mut prior = symmetrize(prior_cov);
    for t in 0..horizon {
        let pct = &prior * c.transpose();
        let innovation = symmetrize(&(c * &pct + &model.sigma_v));
        let chol = innovation
            .cholesky()
            .ok_or(EstimationError::SingularInnovation(t))?;
        // L = P⁻Cᵀ S⁻¹ computed as (S⁻¹ C P⁻)ᵀ.
        let gain = chol.solve(&pct.transpose()).transpose();
        let post = symmetrize(&((&eye - &gain * c) * &prior));
        let next = symmetrize(&(&model.a * &post * model.a.transpose() + &model.sigma_w));
        gains.push(gain);
        p_post.push(post);
        p_prior.push(prior);
        prior = next;
    }
    p_prior.push(prior);
    Ok(KalmanSchedule {
        gains,
        p_post,
        p_prior,
    })
}

/// Measurement update `x̂ = x̂⁻ + L(y − Cx̂⁻)`.
pub fn kf_update(
    prior_mean: &DVector<f64>,
    y: &DVector<f64>,
    gain: &DMatrix<f64>,
    model: &LtiModel,
) -> Result<DVector<f64>, EstimationError> {
    let (n, p) = (model.n(), model.p());
    if prior_mean.len() != n || y.len() != p || gain.shape() != (n, p) {
        return Err(EstimationError::DimensionMismatch {
            context: "kf_update: gain",
            expected: (n, p),
            found: gain.shape(),
        });
    }
    Ok(prior_mean + gain * (y - &model.c * prior_mean))
}

/// Time update `x̂⁻' = Ax̂ + Bu`.
pub fn kf_predict(
    post_mean: &DVector<f64>,
    u: &DVector<f64>,
    model: &LtiModel,
) -> Result<DVector<f64>, EstimationError> {
    if post_mean.len() != model.n() || u.len() != model.m() {
        return Err(EstimationError::DimensionMismatch {
            context: "kf_predict",
            expected: (model.n(), model.m()),
            found: (post_mean.len(), u.len()),
        });
    }
    Ok(&model.a * post_mean + &model.b * u)
}

/// Covariances of `col(x̂_t, x_t)` over the horizon under the affine policy
/// `u_t = u^nom_t + K(x̂_t − x^nom_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    pub sigma: Vec<DMatrix<f64>>,
}

/// Propagates `Σ_t = Λ_t Σ_{t−1} Λ_tᵀ + Δ_t` from
/// `Σ_k = [[Σ^x − P_k, Σ^x − P_k], [Σ^x − P_k, Σ^x]]`, where
///
/// ```text
/// Λ_t = [[A + BK − L_t CA, L_t CA], [BK, A]]
/// Δ_t = [[L_t(CΣ^wCᵀ + Σ^v)L_tᵀ, L_t CΣ^w], [Σ^wCᵀL_tᵀ, Σ^w]]
/// ```
///
/// The off-diagonal blocks of `Δ_t` carry the correlation between the
/// process noise entering `x_t` and the innovation that drives `x̂_t`.
pub fn propagate_joint_covariance(
    model: &LtiModel,
    k_gain: &DMatrix<f64>,
    schedule: &KalmanSchedule,
    prior_cov: &DMatrix<f64>,
    horizon: usize,
) -> Result<JointCovariance, EstimationError> {
    let n = model.n();
    if k_gain.shape() != (model.m(), n) {
        return Err(EstimationError::DimensionMismatch {
            context: "propagate_joint_covariance: K",
            expected: (model.m(), n),
            found: k_gain.shape(),
        });
    }
    if schedule.horizon() < horizon {
        return Err(EstimationError::DimensionMismatch {
            context: "propagate_joint_covariance: schedule horizon",
            expected: (horizon, 1),
            found: (schedule.horizon(), 1),
        });
    }
    if horizon == 0 {
        return Ok(JointCovariance { sigma: Vec::new() });
    }
    let (a, b, c) = (&model.a, &model.b, &model.c);
    let bk = b * k_gain;
    let ca = c * a;
    let csw = c * &model.sigma_w;
    let inn = c * &csw.transpose() + &model.sigma_v;

    let diff = prior_cov - &schedule.p_post[0];
    let mut first = DMatrix::zeros(2 * n, 2 * n);
    first.view_mut((0, 0), (n, n)).copy_from(&diff);
    first.view_mut((0, n), (n, n)).copy_from(&diff);
    first.view_mut((n, 0), (n, n)).copy_from(&diff);
    first.view_mut((n, n), (n, n)).copy_from(prior_cov);
    let mut sigma = Vec::with_capacity(horizon);
    sigma.push(symmetrize(&first));

    for t in 1..horizon {
        let l = &schedule.gains[t];
        let lca = l * &ca;
        let mut lambda = DMatrix::zeros(2 * n, 2 * n);
        lambda.view_mut((0, 0), (n, n)).copy_from(&(a + &bk - &lca));
        lambda.view_mut((0, n), (n, n)).copy_from(&lca);
        lambda.view_mut((n, 0), (n, n)).copy_from(&bk);
        lambda.view_mut((n, n), (n, n)).copy_from(a);
        let cross = l * &csw;
        let mut delta = DMatrix::zeros(2 * n, 2 * n);
        delta
            .view_mut((0, 0), (n, n))
            .copy_from(&(l * &inn * l.transpose()));
        delta.view_mut((0, n), (n, n)).copy_from(&cross);
        delta.view_mut((n, 0), (n, n)).copy_from(&cross.transpose());
        delta.view_mut((n, n), (n, n)).copy_from(&model.sigma_w);
        let next = &lambda * &sigma[t - 1] * lambda.transpose() + delta;
        sigma.push(symmetrize(&next));
    }
    Ok(JointCovariance { sigma })
}

/// `Σ^u_t = [K, 0] Σ_t [K, 0]ᵀ` and `Σ^y_t = [0, C] Σ_t [0, C]ᵀ + Σ^v`.
pub fn io_variances(
    model: &LtiModel,
    k_gain: &DMatrix<f64>,
    joint: &JointCovariance,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = model.n();
    let mut sigma_u = Vec::with_capacity(joint.sigma.len());
    let mut sigma_y = Vec::with_capacity(joint.sigma.len());
    for s in &joint.sigma {
        let hat = s.view((0, 0), (n, n));
        let state = s.view((n, n), (n, n));
        sigma_u.push(symmetrize(&(k_gain * hat * k_gain.transpose())));
        sigma_y.push(symmetrize(
            &(&model.c * state * model.c.transpose() + &model.sigma_v),
        ));
    }
    (sigma_u, sigma_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{random_minimal_system, standard_normal_vector, step_rng};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, sw: f64, sv: f64) -> LtiModel {
        LtiModel::new(s(a), s(1.0), s(1.0), s(sw), s(sv)).unwrap()
    }

    #[test]
    fn perfect_prior_gives_zero_gains() {
        let sched = kalman_schedule(&scalar(0.9, 0.0, 1.0), &s(0.0), 4).unwrap();
        assert!(sched.gains.iter().all(|l| l[(0, 0)] == 0.0));
        assert!(sched
            .p_post
            .iter()
            .chain(&sched.p_prior)
            .all(|p| p[(0, 0)] == 0.0));
        assert_eq!(sched.p_prior.len(), 5);
    }

    #[test]
    fn single_update_by_hand() {
        let sched = kalman_schedule(&scalar(1.0, 0.0, 1.0), &s(1.0), 1).unwrap();
        assert!((sched.gains[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((sched.p_post[0][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn harmonic_posterior_sequence() {
        let sched = kalman_schedule(&scalar(1.0, 0.0, 1.0), &s(1.0), 3).unwrap();
        // P_{t+1} = P_t / (1 + P_t) from P = 1.
        let mut p = 1.0_f64;
        for t in 0..3 {
            p /= 1.0 + p;
            assert!((sched.p_post[t][(0, 0)] - p).abs() < 1e-14);
            assert!((sched.p_post[t][(0, 0)] - 1.0 / (t as f64 + 2.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn posterior_identity_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_minimal_system(&mut rng, 3, 1, 2, 0.95, 0.1, 0.2);
        let prior = DMatrix::identity(3, 3) * 2.0;
        let sched = kalman_schedule(&model, &prior, 100).unwrap();
        for t in 0..100 {
            let recon = (DMatrix::identity(3, 3) - &sched.gains[t] * &model.c) * &sched.p_prior[t];
            assert!((&recon - &sched.p_post[t]).amax() < 1e-10);
            assert!(min_symmetric_eigenvalue(&sched.p_post[t]) >= -1e-8);
        }
        let sched = kalman_schedule(&scalar(1.0, 0.0, 0.5), &s(3.0), 30).unwrap();
        for t in 1..30 {
            assert!(sched.p_post[t][(0, 0)] <= sched.p_post[t - 1][(0, 0)]);
        }
    }

    #[test]
    fn filter_steps() {
        let model = scalar(0.5, 0.0, 1.0);
        let one = |v| DVector::from_element(1, v);
        assert_eq!(
            kf_update(&one(1.0), &one(3.0), &s(0.0), &model).unwrap(),
            one(1.0)
        );
        assert_eq!(
            kf_update(&one(1.0), &one(1.0), &s(0.7), &model).unwrap(),
            one(1.0)
        );
        assert_eq!(
            kf_update(&one(1.0), &one(3.0), &s(0.5), &model).unwrap(),
            one(2.0)
        );
        assert_eq!(kf_predict(&one(0.0), &one(0.0), &model).unwrap(), one(0.0));
        assert_eq!(kf_predict(&one(2.0), &one(0.0), &model).unwrap(), one(1.0));
    }

    #[test]
    fn deterministic_state_has_zero_joint_covariance() {
        let model = scalar(0.9, 0.0, 1.0);
        let sched = kalman_schedule(&model, &s(0.0), 5).unwrap();
        let joint = propagate_joint_covariance(&model, &s(-0.2), &sched, &s(0.0), 5).unwrap();
        assert!(joint.sigma.iter().all(|m| m.amax() == 0.0));
        let (su, sy) = io_variances(&model, &s(-0.2), &joint);
        assert!(su.iter().all(|m| m[(0, 0)] == 0.0));
        assert!(sy.iter().all(|m| m[(0, 0)] == 1.0));
    }

    #[test]
    fn first_block_and_zero_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_minimal_system(&mut rng, 2, 1, 1, 0.9, 0.1, 0.3);
        let prior = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let sched = kalman_schedule(&model, &prior, 6).unwrap();
        let k0 = DMatrix::zeros(1, 2);
        let joint = propagate_joint_covariance(&model, &k0, &sched, &prior, 6).unwrap();
        assert_eq!(
            joint.sigma[0].view((2, 2), (2, 2)),
            prior.view((0, 0), (2, 2))
        );
        let (su, _) = io_variances(&model, &k0, &joint);
        assert!(su.iter().all(|m| m.amax() == 0.0));
        for m in &joint.sigma {
            assert!(min_symmetric_eigenvalue(m) >= -1e-8);
        }
    }

    // Simulates the plant, filter and affine policy with zero nominal
    // trajectory and returns per-step samples of (x̂_t, x_t, u_t, y_t).
    fn monte_carlo_scalar(samples: usize, steps: usize) -> Vec<[Vec<f64>; 4]> {
        let (a, sw, sv, k, p0) = (0.9, 0.1, 1.0, -0.2, 1.0);
        let model = scalar(a, sw, sv);
        let sched = kalman_schedule(&model, &s(p0), steps).unwrap();
        let gains: Vec<f64> = sched.gains.iter().map(|l| l[(0, 0)]).collect();
        let mut out: Vec<[Vec<f64>; 4]> = (0..steps).map(|_| Default::default()).collect();
        for i in 0..samples {
            let mut rng = step_rng(2024, 0, i);
            let z = standard_normal_vector(&mut rng, 1 + 2 * steps);
            let mut x = p0.sqrt() * z[0];
            let mut xhat_prior = 0.0;
            for t in 0..steps {
                let y = x + sv.sqrt() * z[1 + 2 * t];
                let xhat = xhat_prior + gains[t] * (y - xhat_prior);
                let u = k * xhat;
                out[t][0].push(xhat);
                out[t][1].push(x);
                out[t][2].push(u);
                out[t][3].push(y);
                x = a * x + u + sw.sqrt() * z[2 + 2 * t];
                xhat_prior = a * xhat + u;
            }
        }
        out
    }

    fn cov(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n - 1.0)
    }

    #[test]
    fn joint_covariance_matches_monte_carlo() {
        let samples = 1_000_000;
        let steps = 3;
        let model = scalar(0.9, 0.1, 1.0);
        let k = s(-0.2);
        let sched = kalman_schedule(&model, &s(1.0), steps).unwrap();
        let joint = propagate_joint_covariance(&model, &k, &sched, &s(1.0), steps).unwrap();
        let (su, sy) = io_variances(&model, &k, &joint);
        let mc = monte_carlo_scalar(samples, steps);
        let m = samples as f64;
        for t in 0..steps {
            let pred = &joint.sigma[t];
            for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                let emp = cov(&mc[t][i], &mc[t][j]);
                let se = ((pred[(i, i)] * pred[(j, j)] + pred[(i, j)].powi(2)) / m).sqrt();
                assert!(
                    (emp - pred[(i, j)]).abs() <= 3.0 * se,
                    "t={t} ({i},{j}): {emp} vs {}",
                    pred[(i, j)]
                );
            }
            let var_u = cov(&mc[t][2], &mc[t][2]);
            let var_y = cov(&mc[t][3], &mc[t][3]);
            let (pu, py) = (su[t][(0, 0)], sy[t][(0, 0)]);
            assert!(
                (var_u - pu).abs() <= 3.0 * pu * (2.0 / m).sqrt(),
                "t={t}: var u"
            );
            assert!(
                (var_y - py).abs() <= 3.0 * py * (2.0 / m).sqrt(),
                "t={t}: var y"
            );
        }
    }
}
