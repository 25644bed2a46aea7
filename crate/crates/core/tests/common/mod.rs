//! Oracles and fixtures shared by the integration targets.
#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix3x6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatpose::lie::{exp_so3, jac_point_left, jac_point_right, jac_rot_left, jac_rot_right, RigidTransform as Rt};
use splatpose::{RigidTransform, Twist};

pub const LIE_FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Rotation angle up to about 2.6 rad, translation within `scale`.
pub fn random_pose(rng: &mut impl Rng, scale: f64) -> RigidTransform {
    RigidTransform::from_parts(exp_so3(&random_vec(rng, 1.5)), random_vec(rng, scale))
}

fn unit_twist(a: usize, h: f64) -> Twist {
    let mut v = Vector6::zeros();
    v[a] = h;
    Twist::from_vector(&v)
}

/// Central-difference Jacobian of `f(tau)` at zero.
pub fn fd_point(f: impl Fn(&Twist) -> Vector3<f64>) -> Matrix3x6<f64> {
    let h = LIE_FD_STEP;
    let mut j = Matrix3x6::zeros();
    for a in 0..6 {
        let d = (f(&unit_twist(a, h)) - f(&unit_twist(a, -h))) / (2.0 * h);
        j.set_column(a, &d);
    }
    j
}

fn rel(an: &[f64], fd: &[f64]) -> f64 {
    let scale = an.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    an.iter().zip(fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs())) / scale
}

/// Worst relative error of the four pose Jacobians against central
/// differences for one pose and point.
pub fn lie_jacobian_errors(t: &RigidTransform, p_m: &Vector3<f64>) -> [f64; 4] {
    let p_c = t.transform_point(p_m);
    let left = rel(
        jac_point_left(&p_c).as_slice(),
        fd_point(|tau| t.perturb_left(tau).transform_point(p_m)).as_slice(),
    );
    let right = rel(
        jac_point_right(t, p_m).as_slice(),
        fd_point(|tau| t.perturb_right(tau).transform_point(p_m)).as_slice(),
    );

    let rot = |jac: &splatpose::lie::RotationJacobian<f64>, perturb: &dyn Fn(&Vector3<f64>) -> Matrix3<f64>| {
        let h = LIE_FD_STEP;
        let mut worst = 0.0f64;
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = 1.0;
            let fd = (perturb(&(e * h)) - perturb(&(-e * h))) / (2.0 * h);
            worst = worst.max(rel(jac.apply(&e).as_slice(), fd.as_slice()));
        }
        worst
    };
    let r = t.rotation;
    let rot_left = rot(&jac_rot_left(&r), &|phi| exp_so3(phi) * r);
    let rot_right = rot(&jac_rot_right(&r), &|phi| r * exp_so3(phi));
    [left, right, rot_left, rot_right]
}

pub fn rotation_deg(a: &Rt<f64>, b: &Rt<f64>) -> f64 {
    splatpose::metrics::rotation_error(&a.rotation, &b.rotation).to_degrees()
}
