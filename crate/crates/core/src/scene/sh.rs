//! Real spherical harmonics up to degree 3, in the constant and sign
//! convention used by common 3D Gaussian splatting checkpoints.

use nalgebra::Vector3;

use crate::scalar::{lit, Real};

/// Number of coefficients per color channel for degree 3.
pub const SH_COEFFS: usize = 16;

/// Per-channel SH coefficients, `[channel][basis]`.
pub type ShCoeffs<T> = [[T; SH_COEFFS]; 3];

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH expansion to obtain a display color.
pub const SH_COLOR_OFFSET: f64 = 0.5;

/// Basis values `y_l^m(dir)` for a unit direction.
pub fn basis<T: Real>(dir: &Vector3<T>) -> [T; SH_COEFFS] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c = |v: f64| lit::<T>(v);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let three: T = lit(3.0);
    let four: T = lit(4.0);
    let two: T = lit(2.0);
    [
        c(SH_C0),
        -c(SH_C1) * y,
        c(SH_C1) * z,
        -c(SH_C1) * x,
        c(SH_C2[0]) * xy,
        c(SH_C2[1]) * yz,
        c(SH_C2[2]) * (two * zz - xx - yy),
        c(SH_C2[3]) * xz,
        c(SH_C2[4]) * (xx - yy),
        c(SH_C3[0]) * y * (three * xx - yy),
        c(SH_C3[1]) * xy * z,
        c(SH_C3[2]) * y * (four * zz - xx - yy),
        c(SH_C3[3]) * z * (two * zz - three * xx - three * yy),
        c(SH_C3[4]) * x * (four * zz - xx - yy),
        c(SH_C3[5]) * z * (xx - yy),
        c(SH_C3[6]) * x * (xx - three * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unnormalized) direction components.
pub fn basis_gradient<T: Real>(dir: &Vector3<T>) -> [Vector3<T>; SH_COEFFS] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c = |v: f64| lit::<T>(v);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let zero = T::zero();
    let v = Vector3::new;
    [
        v(zero, zero, zero),
        v(zero, -c(SH_C1), zero),
        v(zero, zero, c(SH_C1)),
        v(-c(SH_C1), zero, zero),
        v(c(SH_C2[0]) * y, c(SH_C2[0]) * x, zero),
        v(zero, c(SH_C2[1]) * z, c(SH_C2[1]) * y),
        v(c(-2.0 * SH_C2[2]) * x, c(-2.0 * SH_C2[2]) * y, c(4.0 * SH_C2[2]) * z),
        v(c(SH_C2[3]) * z, zero, c(SH_C2[3]) * x),
        v(c(2.0 * SH_C2[4]) * x, c(-2.0 * SH_C2[4]) * y, zero),
        v(
            c(6.0 * SH_C3[0]) * x * y,
            c(3.0 * SH_C3[0]) * (xx - yy),
            zero,
        ),
        v(c(SH_C3[1]) * y * z, c(SH_C3[1]) * x * z, c(SH_C3[1]) * x * y),
        v(
            c(-2.0 * SH_C3[2]) * x * y,
            c(SH_C3[2]) * (c(4.0) * zz - xx - c(3.0) * yy),
            c(8.0 * SH_C3[2]) * y * z,
        ),
        v(
            c(-6.0 * SH_C3[3]) * x * z,
            c(-6.0 * SH_C3[3]) * y * z,
            c(SH_C3[3]) * (c(6.0) * zz - c(3.0) * xx - c(3.0) * yy),
        ),
        v(
            c(SH_C3[4]) * (c(4.0) * zz - c(3.0) * xx - yy),
            c(-2.0 * SH_C3[4]) * x * y,
            c(8.0 * SH_C3[4]) * x * z,
        ),
        v(
            c(2.0 * SH_C3[5]) * x * z,
            c(-2.0 * SH_C3[5]) * y * z,
            c(SH_C3[5]) * (xx - yy),
        ),
        v(
            c(3.0 * SH_C3[6]) * (xx - yy),
            c(-6.0 * SH_C3[6]) * x * y,
            zero,
        ),
    ]
}

/// SH expansion per channel, without offset or clamping.
pub fn eval_sh_raw<T: Real>(dir: &Vector3<T>, coeffs: &ShCoeffs<T>) -> [T; 3] {
    let b = basis(dir);
    let mut out = [T::zero(); 3];
    for (ch, row) in coeffs.iter().enumerate() {
        out[ch] = row.iter().zip(b.iter()).fold(T::zero(), |acc, (c, y)| acc + *c * *y);
    }
    out
}

/// Display color for a viewing direction: expansion + 0.5, clamped to [0, 1].
pub fn eval_sh<T: Real>(dir: &Vector3<T>, coeffs: &ShCoeffs<T>) -> [T; 3] {
    let raw = eval_sh_raw(dir, coeffs);
    let offset: T = lit(SH_COLOR_OFFSET);
    raw.map(|v| (v + offset).clamp(T::zero(), T::one()))
}

/// DC coefficient that makes a degree-0 model display `color`.
pub fn dc_from_color<T: Real>(color: T) -> T {
    (color - lit(SH_COLOR_OFFSET)) / lit(SH_C0)
}
