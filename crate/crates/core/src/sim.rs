//! Synthetic camera trajectories and an analytically rendered planar scene,
//! used by the pipeline's simulate mode and by end-to-end tests that need
//! exact reference depth.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{Matrix3, Unit, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::sweep::{ImageTensor, Intrinsics};

/// Camera path shapes. Angles are degrees, lengths world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Equal steps along the x axis, all cameras facing +z.
    Collinear { spacing: f64 },
    /// Cameras on a circle, each facing the circle's center point ahead.
    Arc { radius: f64, step_deg: f64 },
    /// Fixed-length translation steps in random directions with a bounded
    /// random rotation per step.
    Random { step: f64, rot_step: f64 },
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collinear" => Ok(Self::Collinear { spacing: 0.3 }),
            "arc" => Ok(Self::Arc {
                radius: 3.0,
                step_deg: 5.0,
            }),
            "random" => Ok(Self::Random {
                step: 0.25,
                rot_step: 0.05,
            }),
            other => Err(Error::Config(format!(
                "unknown trajectory kind {other:?}, expected collinear | arc | random"
            ))),
        }
    }
}

/// Uniformly distributed rotation matrix (random unit quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return nalgebra::UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// World-from-camera rotation with the camera's +z axis pointing from
/// `position` toward `target`.
fn look_at(position: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let forward = target - position;
    if forward.norm() < 1e-9 {
        return Err(Error::InvalidRange("camera is on its target".into()));
    }
    let forward = forward.normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let right = up.cross(&forward);
    if right.norm() < 1e-9 {
        return Err(Error::InvalidRange(
            "viewing direction is parallel to the up axis".into(),
        ));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_columns(&[right, down, forward]))
}

pub fn simulate_trajectory(n: usize, kind: &TrajectoryKind, seed: u64) -> Result<Vec<Pose<f64>>> {
    if n == 0 {
        return Err(Error::InvalidRange("trajectory needs at least 1 pose".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = Vec::with_capacity(n);
    match *kind {
        TrajectoryKind::Collinear { spacing } => {
            if !spacing.is_finite() || spacing <= 0.0 {
                return Err(Error::InvalidRange(format!("bad spacing {spacing}")));
            }
            for i in 0..n {
                let t = Vector3::new(spacing * i as f64, 0.0, 0.0);
                poses.push(Pose::new(Matrix3::identity(), t)?);
            }
        }
        TrajectoryKind::Arc { radius, step_deg } => {
            if !radius.is_finite() || radius <= 0.0 {
                return Err(Error::InvalidRange(format!("bad radius {radius}")));
            }
            if !step_deg.is_finite() || step_deg <= 0.0 || step_deg * (n as f64 - 1.0) >= 80.0 {
                return Err(Error::InvalidRange(format!(
                    "arc step {step_deg} deg over {n} poses leaves the forward-facing range"
                )));
            }
            let target = Vector3::new(0.0, 0.0, radius);
            for i in 0..n {
                let phi = step_deg.to_radians() * i as f64;
                let position =
                    target + radius * Vector3::new(phi.sin(), 0.0, -phi.cos());
                let r = look_at(&position, &target)?;
                poses.push(Pose::new(r, position)?);
            }
        }
        TrajectoryKind::Random { step, rot_step } => {
            if !step.is_finite() || step <= 0.0 {
                return Err(Error::InvalidRange(format!("bad step {step}")));
            }
            if !rot_step.is_finite() || rot_step < 0.0 {
                return Err(Error::InvalidRange(format!("bad rot_step {rot_step}")));
            }
            let mut r = Matrix3::identity();
            let mut t = Vector3::zeros();
            poses.push(Pose::new(r, t)?);
            for _ in 1..n {
                t += step * random_unit_vector(&mut rng);
                let axis = Unit::new_normalize(random_unit_vector(&mut rng));
                let angle = rng.random_range(0.0..=rot_step.max(f64::MIN_POSITIVE));
                let delta = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
                r = delta * r;
                poses.push(Pose::new(r, t)?);
            }
        }
    }
    Ok(poses)
}

/// Fronto-parallel world plane at `z = d_star` carrying a smooth sinusoidal
/// texture with the given world-unit wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneScene {
    pub d_star: f64,
    pub wavelength: f64,
    pub channels: usize,
}

impl PlaneScene {
    pub fn new(d_star: f64, wavelength: f64, channels: usize) -> Result<Self> {
        if !d_star.is_finite() || d_star <= 0.0 {
            return Err(Error::InvalidRange(format!("bad plane depth {d_star}")));
        }
        if !wavelength.is_finite() || wavelength <= 0.0 {
            return Err(Error::InvalidRange(format!("bad wavelength {wavelength}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidRange(format!("bad channel count {channels}")));
        }
        Ok(Self {
            d_star,
            wavelength,
            channels,
        })
    }

    fn intensity(&self, c: usize, px: f64, py: f64) -> f64 {
        // Per-channel phase offsets keep the channels distinct.
        let phase = [0.0, 2.1, 4.2][c];
        let k = 2.0 * PI / self.wavelength;
        0.5 + 0.25 * (k * px + phase).sin() + 0.25 * (k * py * 0.7 + 1.3 + phase).sin()
    }
}

/// Renders the plane from one camera: the image plus the exact per-pixel
/// depth of the plane in the camera frame. Every pixel ray must hit the
/// plane in front of the camera.
pub fn render_plane_view(
    k: &Intrinsics<f64>,
    pose: &Pose<f64>,
    scene: &PlaneScene,
) -> Result<(ImageTensor<f64>, Array2<f64>)> {
    let (w, h) = (k.width(), k.height());
    let k_inv = k.k_inverse();
    let r = pose.rotation();
    let t = pose.translation();
    let mut image = Array3::zeros((scene.channels, h, w));
    let mut depth = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let ray_cam = k_inv * Vector3::new(x as f64, y as f64, 1.0);
            let ray_world = r * ray_cam;
            if ray_world[2] <= 1e-9 {
                return Err(Error::InvalidRange(format!(
                    "pixel ({x}, {y}) does not face the scene plane"
                )));
            }
            let s = (scene.d_star - t[2]) / ray_world[2];
            if s <= 0.0 {
                return Err(Error::InvalidRange(format!(
                    "plane is behind the camera at pixel ({x}, {y})"
                )));
            }
            let point = t + s * ray_world;
            // Ray depth equals camera-frame z because the ray has unit z in
            // camera coordinates.
            depth[[y, x]] = s;
            for c in 0..scene.channels {
                image[[c, y, x]] = scene.intensity(c, point[0], point[1]);
            }
        }
    }
    Ok((ImageTensor::new(image)?, depth))
}

/// Complete synthetic sequence: poses, rendered views and exact depth.
pub struct SimulatedSequence {
    pub poses: Vec<Pose<f64>>,
    pub images: Vec<ImageTensor<f64>>,
    pub depths: Vec<Array2<f64>>,
}

pub fn simulate_sequence(
    k: &Intrinsics<f64>,
    kind: &TrajectoryKind,
    n: usize,
    seed: u64,
    scene: &PlaneScene,
) -> Result<SimulatedSequence> {
    let poses = simulate_trajectory(n, kind, seed)?;
    let mut images = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for pose in &poses {
        let (image, depth) = render_plane_view(k, pose, scene)?;
        images.push(image);
        depths.push(depth);
    }
    Ok(SimulatedSequence {
        poses,
        images,
        depths,
    })
}
