//! Camera poses and the blended translation/rotation distance that drives
//! the fusion kernels.
//!
//! Poses are world-from-camera: `x_world = R * x_cam + t`, so `t` is the
//! camera center in world coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};

/// World-from-camera rigid transform. The rotation block is validated at
/// construction and never re-orthonormalized silently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    r: Matrix3<T>,
    t: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Builds a pose, rejecting rotation blocks that fail
    /// [`validate_rotation`].
    pub fn new(r: Matrix3<T>, t: Vector3<T>) -> Result<Self> {
        validate_rotation(&r)?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose translation"));
        }
        Ok(Self { r, t })
    }

    /// Builds a pose after projecting `r` onto the nearest rotation matrix.
    /// This is the only re-orthonormalization path; use it deliberately.
    pub fn orthonormalized(r: Matrix3<T>, t: Vector3<T>) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose rotation"));
        }
        let svd = r.svd(true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let mut fixed = u * v_t;
        if fixed.determinant() < T::zero() {
            // Flip the axis of least significance to stay in SO(3).
            let mut u_neg = u;
            u_neg.column_mut(2).neg_mut();
            fixed = u_neg * v_t;
        }
        Self::new(fixed, t)
    }

    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.r
    }

    /// Camera center in world coordinates.
    pub fn translation(&self) -> &Vector3<T> {
        &self.t
    }
}

/// Relative transform mapping reference-camera coordinates into
/// neighbor-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose<T: Real> {
    r: Matrix3<T>,
    t: Vector3<T>,
}

impl<T: Real> RelativePose<T> {
    pub fn new(r: Matrix3<T>, t: Vector3<T>) -> Result<Self> {
        validate_rotation(&r)?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("relative translation"));
        }
        Ok(Self { r, t })
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.t
    }
}

/// Checks orthonormality (`|R'R - I|_F`) and `det R = 1` against the
/// scalar's tolerance. Non-finite entries are rejected.
pub fn validate_rotation<T: Real>(r: &Matrix3<T>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rotation matrix"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    let tol = T::orthonormality_tol();
    if ortho > tol || (det - T::one()).abs() > tol {
        return Err(Error::NotARotation {
            orthogonality: to_f64(ortho),
            determinant: to_f64(det),
        });
    }
    Ok(())
}

/// Distance between two poses: `sqrt(|t_i - t_j|^2 + (2/3) tr(I - R_i'R_j))`.
///
/// Symmetric and zero iff the poses coincide. The rotation term equals
/// `(4/3)(1 - cos theta)` and is bounded by 8/3, so rotation alone
/// contributes at most `sqrt(8/3)`.
pub fn pose_distance<T: Real>(a: &Pose<T>, b: &Pose<T>) -> T {
    // Bitwise-identical poses are exactly coincident; the trace below only
    // recovers that up to round-off.
    if a.r == b.r && a.t == b.t {
        return T::zero();
    }
    let dt = a.t - b.t;
    let trace = (a.r.transpose() * b.r).trace();
    // Round-off can push the trace term microscopically negative when the
    // rotations coincide.
    let rot = (real::<T>(2.0 / 3.0) * (real::<T>(3.0) - trace)).max(T::zero());
    (dt.norm_squared() + rot).sqrt()
}

/// Geodesic angle between two rotations, in radians within `[0, pi]`.
pub fn rotation_angle<T: Real>(ra: &Matrix3<T>, rb: &Matrix3<T>) -> T {
    let c = ((ra.transpose() * rb).trace() - T::one()) / real::<T>(2.0);
    c.clamp(-T::one(), T::one()).acos()
}

/// Relative transform from `reference` camera coordinates into `neighbor`
/// camera coordinates: `R = R_nbr' R_ref`, `t = R_nbr' (t_ref - t_nbr)`.
pub fn relative_pose<T: Real>(reference: &Pose<T>, neighbor: &Pose<T>) -> RelativePose<T> {
    RelativePose {
        r: neighbor.r.transpose() * reference.r,
        t: neighbor.r.transpose() * (reference.t - neighbor.t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOLERANCE: f64 = 1e-12;

    fn rot_z(angle: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        ));
        Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI)).into_inner()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Pose::new(random_rotation(rng), t).unwrap()
    }

    #[test]
    fn identity_is_a_rotation() {
        validate_rotation(&Matrix3::<f64>::identity()).unwrap();
    }

    #[test]
    fn scaled_identity_is_rejected() {
        let err = validate_rotation(&(Matrix3::<f64>::identity() * 2.0)).unwrap_err();
        assert!(matches!(err, Error::NotARotation { .. }));
    }

    #[test]
    fn axis_angle_rotation_validates() {
        let axis = Unit::new_normalize(Vector3::new(1.0, 1.0, 1.0));
        let r = Rotation3::from_axis_angle(&axis, 37f64.to_radians()).into_inner();
        validate_rotation(&r).unwrap();
    }

    #[test]
    fn non_finite_rotation_is_rejected() {
        let mut r = Matrix3::<f64>::identity();
        r[(0, 0)] = f64::NAN;
        assert!(matches!(
            validate_rotation(&r),
            Err(Error::NonFinite("rotation matrix"))
        ));
    }

    #[test]
    fn orthonormalized_projects_back_to_so3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut r = random_rotation(&mut rng);
            // Perturb beyond the validation tolerance.
            r[(0, 1)] += 1e-6;
            assert!(Pose::new(r, Vector3::zeros()).is_err());
            Pose::<f64>::orthonormalized(r, Vector3::zeros()).unwrap();
        }
    }

    #[test]
    fn distance_of_identical_poses_is_zero() {
        let p = Pose::<f64>::identity();
        assert_eq!(pose_distance(&p, &p), 0.0);
    }

    #[test]
    fn distance_of_pure_translation_is_euclidean() {
        let a = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.0)).unwrap();
        let b = Pose::new(Matrix3::identity(), Vector3::new(3.0, 4.0, 0.0)).unwrap();
        assert_relative_eq!(pose_distance(&a, &b), 5.0, max_relative = TOLERANCE);
    }

    #[test]
    fn rotation_only_distances_match_closed_form() {
        let a = Pose::<f64>::identity();
        let half = Pose::new(rot_z(std::f64::consts::PI), Vector3::zeros()).unwrap();
        let quarter = Pose::new(rot_z(std::f64::consts::FRAC_PI_2), Vector3::zeros()).unwrap();
        assert_relative_eq!(
            pose_distance(&a, &half),
            (8.0f64 / 3.0).sqrt(),
            max_relative = TOLERANCE
        );
        assert_relative_eq!(
            pose_distance(&a, &quarter),
            (4.0f64 / 3.0).sqrt(),
            max_relative = TOLERANCE
        );
    }

    #[test]
    fn rotation_term_stays_below_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bound = (8.0f64 / 3.0).sqrt();
        for _ in 0..1000 {
            let a = Pose::new(random_rotation(&mut rng), Vector3::zeros()).unwrap();
            let b = Pose::new(random_rotation(&mut rng), Vector3::zeros()).unwrap();
            assert!(pose_distance(&a, &b) <= bound + TOLERANCE);
        }
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let d_ab = pose_distance(&a, &b);
            let d_ba = pose_distance(&b, &a);
            assert!(d_ab >= 0.0);
            assert_eq!(d_ab, d_ba, "symmetry must be exact");
        }
    }

    #[test]
    fn distance_satisfies_triangle_inequality_empirically() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let lhs = pose_distance(&a, &c);
            let rhs = pose_distance(&a, &b) + pose_distance(&b, &c);
            assert!(lhs <= rhs + 1e-12, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn rotation_angle_matches_construction() {
        let i = Matrix3::<f64>::identity();
        assert_eq!(rotation_angle(&i, &i), 0.0);
        for &angle in &[0.1, 0.5, 1.0, 2.0, 3.0] {
            assert_relative_eq!(
                rotation_angle(&i, &rot_z(angle)),
                angle,
                max_relative = 1e-9
            );
        }
        // Near-degenerate trace must clamp instead of producing NaN.
        let almost_pi = rotation_angle(&i, &rot_z(std::f64::consts::PI));
        assert!(almost_pi.is_finite());
        assert_relative_eq!(almost_pi, std::f64::consts::PI, max_relative = 1e-6);
    }

    #[test]
    fn relative_pose_of_identical_poses_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let rel = relative_pose(&p, &p);
            assert_relative_eq!(*rel.rotation(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(*rel.translation(), Vector3::zeros(), epsilon = 1e-12);
        }
    }

    #[test]
    fn relative_pose_against_identity_neighbor_is_the_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = random_pose(&mut rng);
        let rel = relative_pose(&p, &Pose::identity());
        assert_relative_eq!(*rel.rotation(), *p.rotation(), epsilon = 1e-15);
        assert_relative_eq!(*rel.translation(), *p.translation(), epsilon = 1e-15);
    }

    /// Oracle: mapping a camera-frame point through the relative transform
    /// must match going reference -> world -> neighbor coordinates.
    #[test]
    fn relative_pose_matches_coordinate_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let reference = random_pose(&mut rng);
            let neighbor = random_pose(&mut rng);
            let rel = relative_pose(&reference, &neighbor);
            let x_ref = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.5..5.0),
            );
            let x_world = reference.rotation() * x_ref + reference.translation();
            let x_nbr = neighbor.rotation().transpose() * (x_world - neighbor.translation());
            let via_rel = rel.rotation() * x_ref + rel.translation();
            assert_relative_eq!(via_rel, x_nbr, epsilon = 1e-10);
        }
    }

    #[test]
    fn relative_pose_rotation_survives_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..1000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            validate_rotation(relative_pose(&a, &b).rotation()).unwrap();
        }
    }
}
