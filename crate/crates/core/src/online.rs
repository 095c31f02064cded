//! Online fusion: the constant-cost state-space form of the Matern-3/2 GP.
//!
//! The kernel admits an exact two-dimensional stochastic differential
//! representation, so filtering over pose-distance increments reproduces the
//! batch posterior mean at every step on additive-distance trajectories
//! while touching only a 2x2 covariance and a 2xM mean per frame.

use nalgebra::{DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::pose::{pose_distance, Pose};
use crate::scalar::{real, to_f64, Real};

/// State transition over one pose-distance increment.
#[derive(Debug, Clone, Copy)]
pub struct Transition<T: Real> {
    pub phi: Matrix2<T>,
    pub q: Matrix2<T>,
}

/// Stationary state covariance `diag(gamma_sq, 3 gamma_sq / ell^2)`.
pub fn stationary_covariance<T: Real>(spec: &KernelSpec<T>) -> Result<Matrix2<T>> {
    require_matern(spec)?;
    Ok(Matrix2::new(
        spec.gamma_sq(),
        T::zero(),
        T::zero(),
        real::<T>(3.0) * spec.gamma_sq() / (spec.ell() * spec.ell()),
    ))
}

/// Closed-form transition for distance increment `delta >= 0`:
/// with `lambda = -sqrt(3)/ell`,
/// `Phi = exp(lambda delta) [[1 - lambda delta, delta], [-lambda^2 delta, 1 + lambda delta]]`
/// and `Q = Sigma0 - Phi Sigma0 Phi'`.
///
/// `delta = 0` yields the exact identity and a zero `Q`.
pub fn transition<T: Real>(delta: T, spec: &KernelSpec<T>) -> Result<Transition<T>> {
    require_matern(spec)?;
    if !delta.is_finite() || delta < T::zero() {
        return Err(Error::InvalidRange(format!(
            "transition distance must be finite and nonnegative, got {}",
            to_f64(delta)
        )));
    }
    let lambda = -real::<T>(3.0).sqrt() / spec.ell();
    let ld = lambda * delta;
    let scale = ld.exp();
    let phi = Matrix2::new(
        scale * (T::one() - ld),
        scale * delta,
        scale * (-lambda * lambda * delta),
        scale * (T::one() + ld),
    );
    let sigma0 = stationary_covariance(spec)?;
    let q = sigma0 - propagate(&phi, &sigma0);
    Ok(Transition { phi, q })
}

/// `Phi Sigma Phi'`. Shared by [`transition`] and [`OnlineState::predict`]
/// so the stationary case cancels bitwise.
fn propagate<T: Real>(phi: &Matrix2<T>, sigma: &Matrix2<T>) -> Matrix2<T> {
    phi * sigma * phi.transpose()
}

/// Filter state for one sequence: mean `mu` (2 x M, latents in the first
/// row, their metric derivative in the second) and shared 2x2 covariance.
#[derive(Debug, Clone)]
pub struct OnlineState<T: Real> {
    mu: nalgebra::DMatrix<T>,
    sigma: Matrix2<T>,
    spec: KernelSpec<T>,
    frame_count: u64,
    last_pose: Option<Pose<T>>,
}

impl<T: Real> OnlineState<T> {
    /// Fresh state at the stationary prior: `mu = 0`, `Sigma = Sigma0`.
    /// Only the Matern-3/2 family has this state-space form.
    pub fn new(spec: KernelSpec<T>, latent_len: usize) -> Result<Self> {
        if latent_len == 0 {
            return Err(Error::DimensionMismatch {
                context: "online state",
                expected: "latent length >= 1".into(),
                got: "0".into(),
            });
        }
        let sigma = stationary_covariance(&spec)?;
        Ok(Self {
            mu: nalgebra::DMatrix::zeros(2, latent_len),
            sigma,
            spec,
            frame_count: 0,
            last_pose: None,
        })
    }

    /// Rebuilds a state from snapshot parts. The previous pose is not part
    /// of a snapshot, so the first step after this behaves as a pure update.
    pub(crate) fn from_parts(
        spec: KernelSpec<T>,
        mu: nalgebra::DMatrix<T>,
        sigma: Matrix2<T>,
        frame_count: u64,
    ) -> Result<Self> {
        require_matern(&spec)?;
        if mu.nrows() != 2 || mu.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "online state mean",
                expected: "2 x M with M >= 1".into(),
                got: format!("{} x {}", mu.nrows(), mu.ncols()),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("online state"));
        }
        Ok(Self {
            mu,
            sigma,
            spec,
            frame_count,
            last_pose: None,
        })
    }

    pub fn spec(&self) -> &KernelSpec<T> {
        &self.spec
    }

    pub fn mu(&self) -> &nalgebra::DMatrix<T> {
        &self.mu
    }

    pub fn sigma(&self) -> &Matrix2<T> {
        &self.sigma
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    pub fn latent_len(&self) -> usize {
        self.mu.ncols()
    }

    pub fn last_pose(&self) -> Option<&Pose<T>> {
        self.last_pose.as_ref()
    }

    /// Time/distance propagation by `delta`.
    pub fn predict(&mut self, delta: T) -> Result<()> {
        let tr = transition(delta, &self.spec)?;
        let (p00, p01, p10, p11) = (
            tr.phi[(0, 0)],
            tr.phi[(0, 1)],
            tr.phi[(1, 0)],
            tr.phi[(1, 1)],
        );
        let columns = self.mu.as_mut_slice();
        for col in columns.chunks_exact_mut(2) {
            let (a, b) = (col[0], col[1]);
            col[0] = p00 * a + p01 * b;
            col[1] = p10 * a + p11 * b;
        }
        self.sigma = symmetrized(propagate(&tr.phi, &self.sigma) + tr.q);
        Ok(())
    }

    /// Measurement update with observation vector `y` (one value per latent
    /// dimension) under the spec's `sigma_sq`.
    pub fn update(&mut self, y: &DVector<T>) -> Result<()> {
        if y.len() != self.latent_len() {
            return Err(Error::DimensionMismatch {
                context: "online update",
                expected: format!("observation length {}", self.latent_len()),
                got: y.len().to_string(),
            });
        }
        let s = self.sigma[(0, 0)] + self.spec.sigma_sq();
        if !s.is_finite() || s <= T::zero() {
            return Err(Error::NonpositiveInnovation { value: to_f64(s) });
        }
        let k = Vector2::new(self.sigma[(0, 0)] / s, self.sigma[(1, 0)] / s);
        let columns = self.mu.as_mut_slice();
        for (col, obs) in columns.chunks_exact_mut(2).zip(y.iter()) {
            let innovation = *obs - col[0];
            col[0] += k[0] * innovation;
            col[1] += k[1] * innovation;
        }
        let row0 = self.sigma.row(0).into_owned();
        self.sigma = symmetrized(self.sigma - k * row0);
        Ok(())
    }

    /// One frame: propagate by the pose distance from the previous frame
    /// (pure update if there is none), absorb `y`, return the fused latent.
    pub fn step(&mut self, pose: &Pose<T>, y: &DVector<T>) -> Result<DVector<T>> {
        if let Some(prev) = &self.last_pose {
            let delta = pose_distance(pose, prev);
            self.predict(delta)?;
        }
        self.update(y)?;
        self.last_pose = Some(*pose);
        self.frame_count += 1;
        Ok(self.extract_latent())
    }

    /// Fused latent: the first state row.
    pub fn extract_latent(&self) -> DVector<T> {
        self.mu.row(0).transpose()
    }
}

fn require_matern<T: Real>(spec: &KernelSpec<T>) -> Result<()> {
    if spec.family() != KernelFamily::Matern32 {
        return Err(Error::UnsupportedKernel {
            family: spec.family(),
        });
    }
    Ok(())
}

fn symmetrized<T: Real>(m: Matrix2<T>) -> Matrix2<T> {
    let half = real::<T>(0.5);
    Matrix2::new(
        m[(0, 0)],
        half * (m[(0, 1)] + m[(1, 0)]),
        half * (m[(0, 1)] + m[(1, 0)]),
        m[(1, 1)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{batch_posterior, LatentMatrix};
    use crate::kernels::gram_matrix;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    // exp(-sqrt(3)) * (1 + sqrt(3)), etc.: Phi at ell = 1, delta = 1, frozen
    // from closed form and a scaling-and-squaring matrix exponential.
    const PHI_UNIT: [f64; 4] = [
        0.483_357_724_596_507_7,
        0.176_921_206_317_764_23,
        -0.530_763_618_953_292_6,
        -0.129_515_311_960_979_23,
    ];
    // 3 * 13.82 / 1.098^2.
    const LEARNED_SIGMA0_11: f64 = 34.389_401_495_018_26;

    fn matern(gamma_sq: f64, ell: f64, sigma_sq: f64) -> KernelSpec<f64> {
        KernelSpec::new(KernelFamily::Matern32, gamma_sq, ell, sigma_sq).unwrap()
    }

    fn pose_at(x: f64) -> Pose<f64> {
        Pose::new(Matrix3::identity(), Vector3::new(x, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn init_state_is_the_stationary_prior() {
        let state = OnlineState::new(matern(13.82, 1.098, 1.443), 3).unwrap();
        assert_eq!(state.frame_count(), 0);
        assert_eq!(state.latent_len(), 3);
        assert!(state.mu().iter().all(|&v| v == 0.0));
        assert_eq!(state.sigma()[(0, 0)], 13.82);
        assert_relative_eq!(state.sigma()[(1, 1)], LEARNED_SIGMA0_11, max_relative = 1e-12);
        assert_relative_eq!(
            state.sigma()[(1, 1)],
            3.0 * 13.82 / (1.098 * 1.098),
            max_relative = 1e-15
        );
        assert_eq!(state.sigma()[(0, 1)], 0.0);

        let unit = OnlineState::new(matern(1.0, 1.0, 1.0), 1).unwrap();
        assert_eq!(unit.sigma()[(0, 0)], 1.0);
        assert_eq!(unit.sigma()[(1, 1)], 3.0);
    }

    #[test]
    fn non_matern_families_are_rejected() {
        for family in [KernelFamily::Exponential, KernelFamily::TemporalDifference] {
            let spec = KernelSpec::new(family, 1.0, 1.0, 0.0).unwrap();
            assert!(matches!(
                OnlineState::new(spec, 2),
                Err(Error::UnsupportedKernel { .. })
            ));
            assert!(transition(1.0, &spec).is_err());
        }
    }

    #[test]
    fn zero_distance_transition_is_the_exact_identity() {
        let tr = transition(0.0, &matern(2.0, 0.7, 0.0)).unwrap();
        assert_eq!(tr.phi, Matrix2::identity());
        assert_eq!(tr.q, Matrix2::zeros());
    }

    #[test]
    fn unit_transition_matches_frozen_closed_form() {
        let tr = transition(1.0, &matern(1.0, 1.0, 0.0)).unwrap();
        for (idx, &(i, j)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            assert_relative_eq!(tr.phi[(i, j)], PHI_UNIT[idx], max_relative = 1e-12);
        }
        let s = 3.0f64.sqrt();
        assert_relative_eq!(
            tr.phi[(0, 0)],
            (1.0 + s) * (-s).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn long_transitions_forget_the_past() {
        let spec = matern(2.5, 0.9, 0.0);
        let sigma0 = stationary_covariance(&spec).unwrap();
        let tr = transition(40.0 * 0.9, &spec).unwrap();
        assert!(tr.phi.norm() < 1e-10);
        assert_relative_eq!(tr.q, sigma0, epsilon = 1e-10);
    }

    #[test]
    fn transition_preserves_the_stationary_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..200 {
            let spec = matern(
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                0.0,
            );
            let sigma0 = stationary_covariance(&spec).unwrap();
            let tr = transition(rng.random_range(0.0..20.0), &spec).unwrap();
            let drift = tr.phi * sigma0 * tr.phi.transpose() + tr.q - sigma0;
            assert!(drift.norm() <= 1e-10 * sigma0.norm().max(1.0));
        }
    }

    #[test]
    fn invalid_distances_are_rejected() {
        let spec = matern(1.0, 1.0, 0.0);
        assert!(matches!(
            transition(-0.5, &spec),
            Err(Error::InvalidRange(_))
        ));
        assert!(transition(f64::NAN, &spec).is_err());
    }

    #[test]
    fn predict_at_zero_distance_is_bitwise_identity() {
        let mut state = OnlineState::new(matern(3.0, 1.3, 0.5), 4).unwrap();
        state
            .update(&DVector::from_vec(vec![1.0, -2.0, 0.25, 9.0]))
            .unwrap();
        let mu_before = state.mu().clone();
        let sigma_before = *state.sigma();
        state.predict(0.0).unwrap();
        assert_eq!(*state.mu(), mu_before);
        assert_eq!(*state.sigma(), sigma_before);
    }

    #[test]
    fn predict_from_init_keeps_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..100 {
            let spec = matern(rng.random_range(0.1..10.0), rng.random_range(0.1..10.0), 0.0);
            let mut state = OnlineState::new(spec, 2).unwrap();
            let sigma0 = *state.sigma();
            state.predict(rng.random_range(0.0..10.0)).unwrap();
            assert!(state.mu().iter().all(|&v| v == 0.0));
            assert_relative_eq!(*state.sigma(), sigma0, epsilon = 1e-12 * sigma0.norm());
        }
    }

    #[test]
    fn first_update_uses_the_prior_gain() {
        let mut state = OnlineState::new(matern(1.0, 1.0, 1.0), 2).unwrap();
        state.update(&DVector::from_vec(vec![2.0, -4.0])).unwrap();
        // Gain from the prior is (gamma_sq / (gamma_sq + sigma_sq), 0) = (1/2, 0).
        assert_eq!(state.mu()[(0, 0)], 1.0);
        assert_eq!(state.mu()[(0, 1)], -2.0);
        assert_eq!(state.mu()[(1, 0)], 0.0);
        assert_eq!(state.mu()[(1, 1)], 0.0);
        assert_eq!(state.sigma()[(0, 0)], 0.5);
    }

    #[test]
    fn noiseless_update_absorbs_the_observation_exactly() {
        let mut state = OnlineState::new(matern(2.0, 1.0, 0.0), 3).unwrap();
        let y = DVector::from_vec(vec![0.5, -1.5, 4.0]);
        state.update(&y).unwrap();
        assert_eq!(state.extract_latent(), y);
        assert_eq!(state.sigma()[(0, 0)], 0.0);
    }

    #[test]
    fn infinite_noise_freezes_the_state() {
        let mut state = OnlineState::new(matern(1.0, 1.0, 1e12), 2).unwrap();
        let sigma0 = *state.sigma();
        state.update(&DVector::from_vec(vec![5.0, -5.0])).unwrap();
        assert!(state.mu().norm() <= 1e-10);
        assert_relative_eq!(*state.sigma(), sigma0, max_relative = 1e-10);
    }

    #[test]
    fn nonpositive_innovation_variance_is_an_error_not_a_clamp() {
        // A noiseless update drives sigma_00 to exactly zero; a second
        // update at the same point has nothing to divide by.
        let mut state = OnlineState::new(matern(1.0, 1.0, 0.0), 1).unwrap();
        state.update(&DVector::from_vec(vec![1.0])).unwrap();
        let err = state.update(&DVector::from_vec(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::NonpositiveInnovation { .. }));
    }

    #[test]
    fn mismatched_observation_length_is_rejected() {
        let mut state = OnlineState::new(matern(1.0, 1.0, 1.0), 3).unwrap();
        assert!(matches!(
            state.update(&DVector::from_vec(vec![1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn covariance_stays_symmetric_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let spec = matern(2.0, 0.8, 0.3);
        let mut state = OnlineState::new(spec, 2).unwrap();
        let mut x = 0.0;
        for _ in 0..10_000 {
            x += rng.random_range(0.0..0.5);
            let y = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            state.step(&pose_at(x), &y).unwrap();
            let s = state.sigma();
            assert_eq!(s[(0, 1)], s[(1, 0)]);
            let half_trace = 0.5 * (s[(0, 0)] + s[(1, 1)]);
            let disc = (0.5 * (s[(0, 0)] - s[(1, 1)])).hypot(s[(0, 1)]);
            assert!(half_trace - disc >= -1e-12 * spec.gamma_sq());
            assert!(s[(0, 0)] >= -1e-12 && s[(0, 0)] <= spec.gamma_sq() + 1e-12);
        }
    }

    #[test]
    fn step_tracks_pose_and_frame_count() {
        let mut state = OnlineState::new(matern(1.0, 1.0, 0.5), 1).unwrap();
        assert!(state.last_pose().is_none());
        state
            .step(&pose_at(0.0), &DVector::from_vec(vec![1.0]))
            .unwrap();
        assert_eq!(state.frame_count(), 1);
        assert_eq!(state.last_pose().unwrap().translation().x, 0.0);
        state
            .step(&pose_at(2.0), &DVector::from_vec(vec![0.0]))
            .unwrap();
        assert_eq!(state.frame_count(), 2);
        assert_eq!(state.last_pose().unwrap().translation().x, 2.0);
    }

    /// Oracle: on an additive-distance trajectory the filter equals the
    /// batch posterior mean at the newest frame, for every prefix.
    #[test]
    fn filter_matches_batch_prefixes_on_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let spec = matern(2.2, 1.4, 0.6);
        let n = 12;
        let m = 3;
        let mut xs = vec![0.0];
        for i in 1..n {
            xs.push(xs[i - 1] + rng.random_range(0.05..3.0));
        }
        let poses: Vec<_> = xs.iter().map(|&x| pose_at(x)).collect();
        let y = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));

        let mut state = OnlineState::new(spec, m).unwrap();
        for i in 0..n {
            let fused = state
                .step(&poses[i], &y.row(i).transpose())
                .unwrap();
            let gram = gram_matrix(&poses[..=i], &spec).unwrap();
            let prefix = LatentMatrix::new(y.rows(0, i + 1).into_owned()).unwrap();
            let post = batch_posterior(&gram, &prefix, spec.sigma_sq()).unwrap();
            for j in 0..m {
                assert_relative_eq!(
                    fused[j],
                    post.mean[(i, j)],
                    epsilon = 1e-10,
                    max_relative = 1e-10
                );
            }
        }
    }

    /// Repeated observations at one pose must agree with the jittered batch
    /// solve on duplicated inputs.
    #[test]
    fn repeated_pose_matches_jittered_batch() {
        let spec = matern(1.5, 1.0, 0.8);
        let p = pose_at(1.0);
        let obs = [0.7, -0.2, 0.9];
        let mut state = OnlineState::new(spec, 1).unwrap();
        let mut last = DVector::zeros(1);
        for &v in &obs {
            last = state.step(&p, &DVector::from_vec(vec![v])).unwrap();
        }
        let poses = [p, p, p];
        let gram = gram_matrix(&poses, &spec).unwrap();
        let y = LatentMatrix::new(DMatrix::from_column_slice(3, 1, &obs)).unwrap();
        let post = batch_posterior(&gram, &y, spec.sigma_sq()).unwrap();
        assert_relative_eq!(last[0], post.mean[(2, 0)], epsilon = 1e-6);
    }

    #[test]
    fn generic_scalar_instantiates_at_f32() {
        let spec = KernelSpec::<f32>::new(KernelFamily::Matern32, 1.0, 1.0, 0.5).unwrap();
        let mut state = OnlineState::new(spec, 2).unwrap();
        let fused = state
            .step(
                &Pose::identity(),
                &DVector::from_vec(vec![1.0f32, -1.0]),
            )
            .unwrap();
        assert_relative_eq!(fused[0], 2.0f32 / 3.0, max_relative = 1e-6);
    }
}
