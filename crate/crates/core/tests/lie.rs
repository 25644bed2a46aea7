mod common;

use common::*;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use splatpose::lie::{exp_se3, exp_so3, log_se3, log_so3, rotation_angle, RigidTransform as Rt, Twist as Tw};
use splatpose::{RigidTransform, RigidTransform32, Twist};

#[test]
fn jacobians_match_finite_differences_over_1000_cases() {
    let mut r = rng(11);
    let mut worst = [0.0f64; 4];
    for _ in 0..1000 {
        let t = random_pose(&mut r, 1.0);
        let p = random_vec(&mut r, 0.5);
        for (w, e) in worst.iter_mut().zip(lie_jacobian_errors(&t, &p)) {
            *w = w.max(e);
        }
    }
    assert!(worst.iter().all(|e| *e < 1e-6), "{worst:?}");
}

#[test]
fn exp_log_roundtrip_near_pi_and_zero() {
    for theta in [0.0, 1e-12, 1e-7, 0.3, 3.0, std::f64::consts::PI - 1e-9, std::f64::consts::PI] {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let r = exp_so3(&(axis * theta));
        let back = exp_so3(&log_so3(&r));
        assert!((back - r).amax() < 1e-9, "theta {theta}");
        assert!((rotation_angle(&r) - theta).abs() < 1e-7, "theta {theta}");
    }
}

#[test]
fn compose_inverse_is_identity() {
    let mut r = rng(5);
    for _ in 0..200 {
        let t = random_pose(&mut r, 2.0);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation.amax() < 1e-12);
    }
}

#[test]
fn left_and_right_perturbations_are_conjugate() {
    // exp(tau) T = T exp(Ad(T^-1) tau): compare through points
    let mut r = rng(6);
    let t = random_pose(&mut r, 0.5);
    let tau = Twist::new(random_vec(&mut r, 0.1), random_vec(&mut r, 0.1));
    let left = t.perturb_left(&tau);
    let right = t.perturb_right(&log_se3(&t.inverse().compose(&left)).unwrap());
    assert!((left.to_homogeneous() - right.to_homogeneous()).amax() < 1e-12);
}

#[test]
fn invalid_rotation_is_rejected() {
    let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
}

#[test]
fn single_precision_alias_tracks_double() {
    let tau = Tw::<f32>::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.4, 0.1, -0.2));
    let t: RigidTransform32 = exp_se3(&tau);
    let t64: Rt<f64> = t.cast::<f64>().orthonormalized();
    let tau64 = log_se3(&t64).unwrap();
    assert!((tau64.to_vector() - tau.to_vector().cast::<f64>()).amax() < 1e-5);
}

proptest! {
    #[test]
    fn twist_roundtrip(rho in prop::array::uniform3(-2.0f64..2.0), phi in prop::array::uniform3(-1.7f64..1.7)) {
        let tau = Twist::new(Vector3::from(rho), Vector3::from(phi));
        let back = log_se3(&exp_se3(&tau)).unwrap();
        prop_assert!((back.to_vector() - tau.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn exp_is_a_rotation(phi in prop::array::uniform3(-10.0f64..10.0)) {
        let r = exp_so3(&Vector3::from(phi));
        prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_jacobians_hold_at_random_poses(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let t = random_pose(&mut r, 1.0);
        let p = random_vec(&mut r, 0.3);
        let e = lie_jacobian_errors(&t, &p);
        prop_assert!(e.iter().all(|x| *x < 1e-6), "{:?}", e);
    }
}
