//! Stationary covariance kernels over camera-pose distance, and the Gram
//! matrices they induce on frame sequences.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{pose_distance, Pose};
use crate::scalar::{real, to_f64, Real};

/// Kernel families supported by the fusion modules.
///
/// `TemporalDifference` applies the Matern-3/2 form to frame-index distance
/// `|i - j|` instead of pose distance, as a geometry-free baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern32,
    Exponential,
    TemporalDifference,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Exponential => "exponential",
            KernelFamily::TemporalDifference => "temporal_difference",
        };
        f.write_str(name)
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matern32" => Ok(KernelFamily::Matern32),
            "exponential" => Ok(KernelFamily::Exponential),
            "td" | "temporal_difference" => Ok(KernelFamily::TemporalDifference),
            other => Err(Error::InvalidKernel(format!(
                "unknown family {other:?}; expected matern32, exponential, or td"
            ))),
        }
    }
}

/// Validated kernel hyperparameters: magnitude `gamma_sq > 0`, length scale
/// `ell > 0`, observation noise `sigma_sq >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T: Real> {
    family: KernelFamily,
    gamma_sq: T,
    ell: T,
    sigma_sq: T,
}

impl<T: Real> KernelSpec<T> {
    pub fn new(family: KernelFamily, gamma_sq: T, ell: T, sigma_sq: T) -> Result<Self> {
        if !gamma_sq.is_finite() || gamma_sq <= T::zero() {
            return Err(Error::InvalidKernel(format!(
                "gamma_sq must be finite and positive, got {}",
                to_f64(gamma_sq)
            )));
        }
        if !ell.is_finite() || ell <= T::zero() {
            return Err(Error::InvalidKernel(format!(
                "ell must be finite and positive, got {}",
                to_f64(ell)
            )));
        }
        if !sigma_sq.is_finite() || sigma_sq < T::zero() {
            return Err(Error::InvalidKernel(format!(
                "sigma_sq must be finite and nonnegative, got {}",
                to_f64(sigma_sq)
            )));
        }
        Ok(Self {
            family,
            gamma_sq,
            ell,
            sigma_sq,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn gamma_sq(&self) -> T {
        self.gamma_sq
    }

    pub fn ell(&self) -> T {
        self.ell
    }

    pub fn sigma_sq(&self) -> T {
        self.sigma_sq
    }

    /// Kernel value at distance `d`. The temporal-difference family shares
    /// the Matern-3/2 form; only its distance argument differs.
    pub fn value(&self, d: T) -> T {
        match self.family {
            KernelFamily::Matern32 | KernelFamily::TemporalDifference => {
                matern32(d, self.gamma_sq, self.ell)
            }
            KernelFamily::Exponential => exponential(d, self.gamma_sq, self.ell),
        }
    }
}

/// Matern-3/2: `gamma_sq (1 + sqrt(3) d / ell) exp(-sqrt(3) d / ell)`.
pub fn matern32<T: Real>(d: T, gamma_sq: T, ell: T) -> T {
    let a = real::<T>(3.0).sqrt() * d / ell;
    gamma_sq * (T::one() + a) * (-a).exp()
}

/// Exponential (Ornstein-Uhlenbeck): `gamma_sq exp(-d / ell)`.
pub fn exponential<T: Real>(d: T, gamma_sq: T, ell: T) -> T {
    gamma_sq * (-d / ell).exp()
}

/// Frame-index distance `|i - j|` used by the temporal-difference family.
pub fn td_distance<T: Real>(i: usize, j: usize) -> T {
    T::from_usize(i.abs_diff(j)).expect("index distance representable")
}

/// Symmetric kernel Gram matrix over a frame set. The upper triangle is
/// computed once and mirrored, so symmetry is exact; the diagonal is exactly
/// `gamma_sq`.
#[derive(Debug, Clone)]
pub struct GramMatrix<T: Real> {
    matrix: DMatrix<T>,
    gamma_sq: T,
    poses: Vec<Pose<T>>,
}

impl<T: Real> GramMatrix<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn gamma_sq(&self) -> T {
        self.gamma_sq
    }

    /// Poses the matrix was built from; empty for index-only construction.
    pub fn poses(&self) -> &[Pose<T>] {
        &self.poses
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Test-only escape hatch for exercising downstream failure paths with
    /// matrices that `gram_matrix` can never produce.
    #[cfg(test)]
    pub(crate) fn from_raw(matrix: DMatrix<T>, gamma_sq: T) -> Self {
        Self {
            matrix,
            gamma_sq,
            poses: Vec::new(),
        }
    }
}

/// Builds the Gram matrix for `poses` under `spec`. The temporal-difference
/// family uses positions within the slice instead of pose geometry.
pub fn gram_matrix<T: Real>(poses: &[Pose<T>], spec: &KernelSpec<T>) -> Result<GramMatrix<T>> {
    if poses.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "gram_matrix",
            expected: "at least 1 pose".into(),
            got: "0".into(),
        });
    }
    let mut matrix = build_gram(poses.len(), spec, |i, j| match spec.family() {
        KernelFamily::TemporalDifference => td_distance(i, j),
        _ => pose_distance(&poses[i], &poses[j]),
    });
    set_diagonal(&mut matrix, spec.gamma_sq());
    Ok(GramMatrix {
        matrix,
        gamma_sq: spec.gamma_sq(),
        poses: poses.to_vec(),
    })
}

/// Builds a temporal-difference Gram matrix from frame count alone.
pub fn gram_matrix_td<T: Real>(n: usize, spec: &KernelSpec<T>) -> Result<GramMatrix<T>> {
    if spec.family() != KernelFamily::TemporalDifference {
        return Err(Error::UnsupportedKernel {
            family: spec.family(),
        });
    }
    if n == 0 {
        return Err(Error::DimensionMismatch {
            context: "gram_matrix_td",
            expected: "at least 1 frame".into(),
            got: "0".into(),
        });
    }
    let mut matrix = build_gram(n, spec, |i, j| td_distance(i, j));
    set_diagonal(&mut matrix, spec.gamma_sq());
    Ok(GramMatrix {
        matrix,
        gamma_sq: spec.gamma_sq(),
        poses: Vec::new(),
    })
}

fn build_gram<T: Real>(
    n: usize,
    spec: &KernelSpec<T>,
    distance: impl Fn(usize, usize) -> T,
) -> DMatrix<T> {
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.value(distance(i, j));
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    matrix
}

fn set_diagonal<T: Real>(matrix: &mut DMatrix<T>, gamma_sq: T) {
    for i in 0..matrix.nrows() {
        matrix[(i, i)] = gamma_sq;
    }
}
