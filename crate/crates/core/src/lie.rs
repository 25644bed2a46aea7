//! SE(3) / so(3) algebra.
//!
//! Twists are ordered `[rho; phi]` (translation first). A [`RigidTransform`]
//! maps object-frame points into the camera frame. Perturbations are applied
//! either on the left, `exp(tau) * T` (the camera moves), or on the right,
//! `T * exp(tau)` (the object moves in its own frame).
//!
//! The Jacobians here are first-order derivatives at `tau = 0`.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Below this rotation angle the Rodrigues and V-matrix formulas switch to
/// their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Element of se(3): translational part `rho` and rotational part `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Twist<T: Real> {
    pub rho: Vector3<T>,
    pub phi: Vector3<T>,
}

impl<T: Real> Twist<T> {
    pub fn new(rho: Vector3<T>, phi: Vector3<T>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    /// `[rho0, rho1, rho2, phi0, phi1, phi2]`.
    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<T> {
        Vector6::new(
            self.rho[0],
            self.rho[1],
            self.rho[2],
            self.phi[0],
            self.phi[1],
            self.phi[2],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|x| x.is_finite())
    }
}

/// Rigid motion `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a transform without validation.
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Checks `R^T R = I` and `det R = 1` to the scalar's validation tolerance.
    pub fn validate(&self) -> Result<()> {
        let tol = T::validation_tol();
        if !self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if ortho.amax() > tol {
            return Err(Error::InvalidRotation(format!(
                "R^T R deviates from identity by {:?}",
                ortho.amax()
            )));
        }
        let det = self.rotation.determinant();
        if (det - T::one()).abs() > tol {
            return Err(Error::InvalidRotation(format!("det(R) = {det:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<T>) -> Result<Self> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Re-orthonormalizes the rotation (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Left perturbation `exp(tau) * self`.
    pub fn perturb_left(&self, tau: &Twist<T>) -> Self {
        exp_se3(tau).compose(self)
    }

    /// Right perturbation `self * exp(tau)`.
    pub fn perturb_right(&self, tau: &Twist<T>) -> Self {
        self.compose(&exp_se3(tau))
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|x| lit::<U>(crate::scalar::to_f64(x))),
            translation: self.translation.map(|x| lit::<U>(crate::scalar::to_f64(x))),
        }
    }
}

/// Skew-symmetric matrix with `hat3(v) * w = v x w`.
#[inline]
pub fn hat3<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v[2], v[1], v[2], z, -v[0], -v[1], v[0], z)
}

/// Inverse of [`hat3`] on the antisymmetric part.
#[inline]
pub fn vee3<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half: T = lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Exponential map of SO(3) (Rodrigues).
pub fn exp_so3<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let k2 = k * k;
    if theta < lit(SMALL_ANGLE) {
        Matrix3::identity() + k + k2 * lit::<T>(0.5)
    } else {
        let a = theta.sin() / theta;
        let b = (T::one() - theta.cos()) / (theta * theta);
        Matrix3::identity() + k * a + k2 * b
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn left_jacobian_so3<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let k2 = k * k;
    if theta < lit(SMALL_ANGLE) {
        Matrix3::identity() + k * lit::<T>(0.5) + k2 * lit::<T>(1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        let b = (T::one() - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        Matrix3::identity() + k * b + k2 * c
    }
}

fn left_jacobian_so3_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat3(phi);
    let k2 = k * k;
    let half: T = lit(0.5);
    if theta < lit(SMALL_ANGLE) {
        Matrix3::identity() - k * half + k2 * lit::<T>(1.0 / 12.0)
    } else {
        let t2 = theta * theta;
        let c = (T::one() - theta * theta.sin() / (lit::<T>(2.0) * (T::one() - theta.cos()))) / t2;
        Matrix3::identity() - k * half + k2 * c
    }
}

/// Logarithm of SO(3). Angles at or near pi use axis extraction from the
/// symmetric part of `R`.
pub fn log_so3<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let half: T = lit(0.5);
    let w = vee3(r);
    let sin_theta = w.norm();
    let cos_theta = ((r.trace() - T::one()) * half).clamp(-T::one(), T::one());
    let theta = sin_theta.atan2(cos_theta);

    if theta < lit(SMALL_ANGLE) {
        return w;
    }
    if sin_theta > lit(1e-6) {
        return w * (theta / sin_theta);
    }

    // theta close to pi: (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T
    let sym = (r + r.transpose()) * half;
    let aat = (sym - Matrix3::identity() * cos_theta) / (T::one() - cos_theta);
    let mut k = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vector3<T> = aat.column(k).into_owned() / aat[(k, k)].max(T::zero()).sqrt();
    axis = axis.normalize();
    if axis.dot(&w) < T::zero() {
        axis = -axis;
    }
    axis * theta
}

/// Exponential map of SE(3): `R = Exp(phi)`, `t = V(phi) rho`.
pub fn exp_se3<T: Real>(tau: &Twist<T>) -> RigidTransform<T> {
    RigidTransform {
        rotation: exp_so3(&tau.phi),
        translation: left_jacobian_so3(&tau.phi) * tau.rho,
    }
}

/// Logarithm of SE(3). Fails if `t` does not hold a valid rotation.
pub fn log_se3<T: Real>(t: &RigidTransform<T>) -> Result<Twist<T>> {
    t.validate()?;
    let phi = log_so3(&t.rotation);
    let rho = left_jacobian_so3_inv(&phi) * t.translation;
    Ok(Twist { rho, phi })
}

/// Nearest rotation matrix via SVD.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * v_t
}

/// Derivative of `exp(tau) * p_c` with respect to `tau` at zero:
/// `[I | -hat(p_c)]`.
pub fn jac_point_left<T: Real>(p_c: &Vector3<T>) -> Matrix3x6<T> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat3(p_c)));
    j
}

/// Derivative of `T * exp(tau) * p_m` with respect to `tau` at zero:
/// `R [I | -hat(p_m)]`.
pub fn jac_point_right<T: Real>(t: &RigidTransform<T>, p_m: &Vector3<T>) -> Matrix3x6<T> {
    t.rotation * jac_point_left(p_m)
}

/// Which slices of the rotation matrix the blocks of a [`RotationJacobian`]
/// differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationSlices {
    /// `blocks[j] = d R[:, j] / d phi` (left perturbation).
    Columns,
    /// `blocks[i] = d R[i, :]^T / d phi` (right perturbation).
    Rows,
}

/// Derivative of a rotation matrix with respect to a rotational perturbation,
/// stored as three 3x3 blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationJacobian<T: Real> {
    pub blocks: [Matrix3<T>; 3],
    pub slices: RotationSlices,
}

impl<T: Real> RotationJacobian<T> {
    /// First-order change of `R` for a small rotation `dphi`.
    pub fn apply(&self, dphi: &Vector3<T>) -> Matrix3<T> {
        let mut out = Matrix3::zeros();
        for (k, block) in self.blocks.iter().enumerate() {
            let v = block * dphi;
            match self.slices {
                RotationSlices::Columns => out.set_column(k, &v),
                RotationSlices::Rows => out.set_row(k, &v.transpose()),
            }
        }
        out
    }

    /// Pulls a gradient `dL/dR` back to `dL/dphi`.
    pub fn contract(&self, grad_r: &Matrix3<T>) -> Vector3<T> {
        let mut g = Vector3::zeros();
        for (k, block) in self.blocks.iter().enumerate() {
            let slice: Vector3<T> = match self.slices {
                RotationSlices::Columns => grad_r.column(k).into_owned(),
                RotationSlices::Rows => grad_r.row(k).transpose(),
            };
            g += block.transpose() * slice;
        }
        g
    }
}

/// `d(Exp(phi) R)/d phi` at zero: column `j` moves by `-hat(R[:, j]) dphi`.
pub fn jac_rot_left<T: Real>(r: &Matrix3<T>) -> RotationJacobian<T> {
    let col = |j: usize| -hat3(&r.column(j).into_owned());
    RotationJacobian {
        blocks: [col(0), col(1), col(2)],
        slices: RotationSlices::Columns,
    }
}

/// `d(R Exp(phi))/d phi` at zero: row `i` (as a column vector) moves by
/// `hat(R[i, :]^T) dphi`.
pub fn jac_rot_right<T: Real>(r: &Matrix3<T>) -> RotationJacobian<T> {
    let row = |i: usize| hat3(&r.row(i).transpose());
    RotationJacobian {
        blocks: [row(0), row(1), row(2)],
        slices: RotationSlices::Rows,
    }
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    log_so3(r).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        Twist::new(
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            axis * angle,
        )
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat3(&Vector3::<f64>::zeros()), Matrix3::zeros());
        let h = hat3(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(h, Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = random_twist(&mut rng, 1.0).rho;
            assert!((hat3(&v) * v).norm() < 1e-15);
        }
    }

    #[test]
    fn exp_log_identity_is_exact() {
        let t = exp_se3(&Twist::<f64>::zero());
        assert_eq!(t, RigidTransform::identity());
        let tau = log_se3(&RigidTransform::<f64>::identity()).unwrap();
        assert_eq!(tau, Twist::zero());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = exp_se3(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2)));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(t.rotation, expected, epsilon = 1e-15);
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn pure_translation_log() {
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let tau = log_se3(&t).unwrap();
        assert_eq!(tau.rho, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(tau.phi, Vector3::zeros());
    }

    #[test]
    fn log_at_pi() {
        for axis in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 2.0, -2.0).normalize(),
        ] {
            let phi = axis * std::f64::consts::PI;
            let r = exp_so3(&phi);
            let back = log_so3(&r);
            // axis sign is ambiguous at exactly pi
            assert!((back - phi).norm() < 1e-7 || (back + phi).norm() < 1e-7, "{back:?}");
            assert_relative_eq!(exp_so3(&back), r, epsilon = 1e-12);
        }
    }

    #[test]
    fn small_angle_branch_matches_closed_form() {
        let phi = Vector3::new(3e-9, -2e-9, 1e-9);
        let r = exp_so3(&phi);
        assert!((r - (Matrix3::identity() + hat3(&phi))).amax() < 1e-16);
        let tau = Twist::new(Vector3::new(0.1, 0.2, 0.3), phi);
        let back = log_se3(&exp_se3(&tau)).unwrap();
        assert!((back.to_vector() - tau.to_vector()).amax() < 1e-15);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let t = RigidTransform::from_parts(Matrix3::identity() * 2.0, Vector3::zeros());
        assert!(log_se3(&t).is_err());
        let reflect = RigidTransform::from_parts(
            Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            Vector3::zeros(),
        );
        assert!(reflect.validate().is_err());
    }

    #[test]
    fn jacobian_closed_forms() {
        let j = jac_point_left(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3x6::from_row_slice(&[
            1.0, 0.0, 0.0, 0.0, 3.0, -2.0, //
            0.0, 1.0, 0.0, -3.0, 0.0, 1.0, //
            0.0, 0.0, 1.0, 2.0, -1.0, 0.0,
        ]);
        assert_eq!(j, expected);

        let j0 = jac_point_left(&Vector3::<f64>::zeros());
        assert_eq!(j0.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());

        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(jac_point_right(&RigidTransform::identity(), &p), jac_point_left(&p));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = exp_se3(&random_twist(&mut rng, 2.0));
        let j = jac_point_right(&t, &Vector3::zeros());
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), t.rotation);
        assert_eq!(j.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn rotation_jacobians_at_identity() {
        let left = jac_rot_left(&Matrix3::<f64>::identity());
        let right = jac_rot_right(&Matrix3::<f64>::identity());
        for k in 0..3 {
            let e = Vector3::ith(k, 1.0);
            assert_eq!(left.blocks[k], -hat3(&e));
            // rows vs columns: the two layouts are transposes of each other
            assert_eq!(right.blocks[k], left.blocks[k].transpose());
        }
        assert_eq!(right.apply(&Vector3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn left_rotation_jacobian_first_order_column_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = exp_so3(&random_twist(&mut rng, 3.0).phi);
        let delta = 1e-7;
        let dphi = Vector3::new(0.0, 0.0, delta);
        let change = jac_rot_left(&r).apply(&dphi);
        for j in 0..3 {
            let col = r.column(j).into_owned();
            let expected = Vector3::z().cross(&col) * delta;
            assert!((change.column(j) - expected).norm() < 1e-20);
        }
    }

    #[test]
    fn rotation_jacobian_contract_is_adjoint_of_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = exp_so3(&random_twist(&mut rng, 3.0).phi);
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let dphi = random_twist(&mut rng, 1.0).rho;
        for jac in [jac_rot_left(&r), jac_rot_right(&r)] {
            let lhs = g.component_mul(&jac.apply(&dphi)).sum();
            let rhs = jac.contract(&g).dot(&dphi);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn f32_roundtrip() {
        let tau = Twist::<f32>::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.4, 0.5, -0.6));
        let back = log_se3(&exp_se3(&tau)).unwrap();
        assert!((back.to_vector() - tau.to_vector()).amax() < 1e-5);
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = exp_se3(&random_twist(&mut rng, 3.0));
        let id = a.compose(&a.inverse());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-14);
        assert!(id.translation.norm() < 1e-14);
        let h = a.to_homogeneous();
        let back = RigidTransform::from_homogeneous(&h).unwrap();
        assert_eq!(back, a);
    }
}
