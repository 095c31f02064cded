//! Scalar abstraction for the numeric core.
//!
//! Geometry, kernel, and filter math is generic over [`Real`], implemented
//! for `f32` and `f64`. Concrete aliases live at the crate root.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every numeric module in this crate.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {
    /// Frobenius tolerance for rotation-matrix validation, scaled to the
    /// scalar's precision: a chain of f32 products cannot meet the f64 bound.
    fn orthonormality_tol() -> Self;
}

impl Real for f32 {
    fn orthonormality_tol() -> Self {
        1.0e-4
    }
}

impl Real for f64 {
    fn orthonormality_tol() -> Self {
        1.0e-9
    }
}

/// Converts an `f64` constant into the working scalar type.
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("constant out of scalar range")
}

/// Lossy view of a scalar as `f64`, for error reports.
pub fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
