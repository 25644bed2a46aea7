//! Scalar abstraction shared by the geometric core.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the Lie-group, Gaussian and metric code.
///
/// Implemented for `f32` and `f64`. Rendering, registration and refinement
/// run on `f64` only.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Tolerance used when validating rotations and unit quaternions.
    fn validation_tol() -> Self;
}

impl Real for f32 {
    fn validation_tol() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn validation_tol() -> Self {
        1e-9
    }
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Converts a working scalar into `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("finite scalar")
}
