//! Gaussian-splat object model.

pub mod ply;
pub mod sh;
pub mod synth;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};
pub use sh::{ShCoeffs, SH_COEFFS};

/// Axis-aligned box in the object frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Aabb<T: Real> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<T>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn extent(&self) -> Vector3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<T> {
        (self.min + self.max) * lit::<T>(0.5)
    }

    pub fn diagonal(&self) -> T {
        self.extent().norm()
    }

    /// Normalized coordinates in `[0, 1]^3`; a degenerate axis maps to 0.5.
    pub fn normalize(&self, p: &Vector3<T>) -> Vector3<T> {
        let e = self.extent();
        Vector3::from_fn(|i, _| {
            if e[i] > T::zero() {
                ((p[i] - self.min[i]) / e[i]).clamp(T::zero(), T::one())
            } else {
                lit(0.5)
            }
        })
    }

    /// Inverse of [`Aabb::normalize`].
    pub fn denormalize(&self, c: &Vector3<T>) -> Vector3<T> {
        self.min + c.component_mul(&self.extent())
    }
}

/// Gaussians in the object frame. Scales are linear, opacities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct GaussianModel<T: Real> {
    pub positions: Vec<Vector3<T>>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<Quaternion<T>>,
    pub scales: Vec<Vector3<T>>,
    pub opacities: Vec<T>,
    pub sh: Vec<ShCoeffs<T>>,
}

impl<T: Real> GaussianModel<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidModel("model has no Gaussians".into()));
        }
        if self.rotations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.sh.len() != n
        {
            return Err(Error::InvalidModel("field lengths differ".into()));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = to_f64(q.norm());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidModel(format!("rotation {i} has norm {norm}")));
            }
        }
        if let Some(i) = self.scales.iter().position(|s| s.iter().any(|v| *v <= T::zero())) {
            return Err(Error::InvalidModel(format!("scale {i} is not positive")));
        }
        if let Some(i) = self
            .opacities
            .iter()
            .position(|a| !(*a >= T::zero() && *a <= T::one()))
        {
            return Err(Error::InvalidModel(format!("opacity {i} outside [0, 1]")));
        }
        Ok(())
    }

    /// Axis-aligned box of the Gaussian centers.
    pub fn aabb(&self) -> Option<Aabb<T>> {
        Aabb::from_points(&self.positions)
    }

    /// Covariance of Gaussian `i`.
    pub fn covariance_of(&self, i: usize) -> Result<Matrix3<T>> {
        covariance(&self.rotations[i], &self.scales[i])
    }

    /// Largest distance between two Gaussian centers (exact, quadratic).
    pub fn diameter(&self) -> T {
        diameter(&self.positions)
    }

    pub fn cast<U: Real>(&self) -> GaussianModel<U> {
        let c = |x: T| lit::<U>(to_f64(x));
        GaussianModel {
            positions: self.positions.iter().map(|p| p.map(c)).collect(),
            rotations: self
                .rotations
                .iter()
                .map(|q| Quaternion::new(c(q.w), c(q.i), c(q.j), c(q.k)))
                .collect(),
            scales: self.scales.iter().map(|s| s.map(c)).collect(),
            opacities: self.opacities.iter().map(|a| c(*a)).collect(),
            sh: self.sh.iter().map(|s| s.map(|row| row.map(c))).collect(),
        }
    }

    /// SHA-256 over the geometry fields (positions, rotations, scales,
    /// opacities), used to check that color adaptation leaves them untouched.
    pub fn geometry_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |x: T| h.update(to_f64(x).to_le_bytes());
        for p in &self.positions {
            p.iter().for_each(|v| put(*v));
        }
        for q in &self.rotations {
            q.coords.iter().for_each(|v| put(*v));
        }
        for s in &self.scales {
            s.iter().for_each(|v| put(*v));
        }
        for a in &self.opacities {
            put(*a);
        }
        hex::encode(h.finalize())
    }
}

/// `Sigma = R S S^T R^T` with `S = diag(s)`.
pub fn covariance<T: Real>(r: &Quaternion<T>, s: &Vector3<T>) -> Result<Matrix3<T>> {
    let norm = r.norm();
    if (norm - T::one()).abs() > lit(1e-6) {
        return Err(Error::NonUnitQuaternion(to_f64(norm)));
    }
    let rot = UnitQuaternion::new_unchecked(*r).to_rotation_matrix().into_inner();
    let m = rot * Matrix3::from_diagonal(s);
    let sigma = m * m.transpose();
    // enforce exact symmetry
    Ok((sigma + sigma.transpose()) * lit::<T>(0.5))
}

/// Unnormalized Gaussian `exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))`.
pub fn eval_gaussian<T: Real>(x: &Vector3<T>, mu: &Vector3<T>, sigma: &Matrix3<T>) -> Result<T> {
    let chol = sigma.cholesky().ok_or(Error::SingularCovariance)?;
    let d = x - mu;
    let q = d.dot(&chol.solve(&d));
    Ok((-lit::<T>(0.5) * q).exp())
}

/// Largest pairwise distance, exact `O(n^2)`.
pub fn diameter<T: Real>(points: &[Vector3<T>]) -> T {
    let mut best = T::zero();
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = (a - b).norm_squared();
            if d > best {
                best = d;
            }
        }
    }
    best.sqrt()
}

/// Copy of `model` whose degree-0 color encodes each center's normalized
/// position inside the model's bounding box; higher bands are zeroed.
pub fn make_nocs_model<T: Real>(model: &GaussianModel<T>) -> Result<GaussianModel<T>> {
    let aabb = model
        .aabb()
        .ok_or_else(|| Error::InvalidModel("model has no Gaussians".into()))?;
    let mut out = model.clone();
    for (p, coeffs) in model.positions.iter().zip(out.sh.iter_mut()) {
        let c = aabb.normalize(p);
        *coeffs = [[T::zero(); SH_COEFFS]; 3];
        for ch in 0..3 {
            coeffs[ch][0] = sh::dc_from_color(c[ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
        Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize()
    }

    #[test]
    fn covariance_examples() {
        let id = Quaternion::identity();
        assert_eq!(covariance(&id, &Vector3::new(1.0, 1.0, 1.0)).unwrap(), Matrix3::identity());
        assert_eq!(
            covariance(&id, &Vector3::new(2.0, 1.0, 1.0)).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))
        );
        let bad = Quaternion::new(1.1, 0.0, 0.0, 0.0);
        assert!(matches!(
            covariance(&bad, &Vector3::new(1.0, 1.0, 1.0)),
            Err(Error::NonUnitQuaternion(_))
        ));
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let s = Vector3::new(
                rng.random_range(0.01..2.0),
                rng.random_range(0.01..2.0),
                rng.random_range(0.01..2.0),
            );
            let sigma = covariance(&q, &s).unwrap();
            assert_eq!(sigma, sigma.transpose());
            assert!(sigma.cholesky().is_some());
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            let mut expected: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn gaussian_values() {
        let mu = Vector3::new(0.3, -0.2, 1.0);
        let id = Matrix3::identity();
        assert_eq!(eval_gaussian(&mu, &mu, &id).unwrap(), 1.0);
        let x = mu + Vector3::new(0.0, 1.0, 0.0);
        assert!((eval_gaussian(&x, &mu, &id).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((eval_gaussian(&x, &mu, &id).unwrap() - 0.6065).abs() < 1e-4);
        assert!(matches!(
            eval_gaussian(&x, &mu, &Matrix3::zeros()),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn gaussian_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let s = Vector3::from_fn(|_, _| rng.random_range(0.1..1.0));
            let sigma = covariance(&q, &s).unwrap();
            let mu = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let d = x - mu;
            let naive = (-0.5 * (d.transpose() * sigma.try_inverse().unwrap() * d)[0]).exp();
            let v = eval_gaussian(&x, &mu, &sigma).unwrap();
            assert!((v - naive).abs() <= 1e-12 * naive.max(1e-300) + 1e-300);
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    fn two_point_model() -> GaussianModel<f64> {
        let n = 3;
        GaussianModel {
            positions: vec![
                Vector3::new(-1.0, -2.0, -3.0),
                Vector3::new(1.0, 2.0, 3.0),
                Vector3::new(0.0, 0.0, 0.0),
            ],
            rotations: vec![Quaternion::identity(); n],
            scales: vec![Vector3::new(0.1, 0.1, 0.1); n],
            opacities: vec![0.9; n],
            sh: vec![[[0.3; SH_COEFFS]; 3]; n],
        }
    }

    #[test]
    fn nocs_colors_encode_normalized_positions() {
        let model = two_point_model();
        let nocs = make_nocs_model(&model).unwrap();
        let view = Vector3::new(0.3, 0.1, 0.9).normalize();
        let c_min = sh::eval_sh(&view, &nocs.sh[0]);
        let c_max = sh::eval_sh(&view, &nocs.sh[1]);
        let c_mid = sh::eval_sh(&view, &nocs.sh[2]);
        for ch in 0..3 {
            assert!(c_min[ch].abs() < 1e-15);
            assert!((c_max[ch] - 1.0).abs() < 1e-15);
            assert!((c_mid[ch] - 0.5).abs() < 1e-15);
            assert!(nocs.sh[0][ch][1..].iter().all(|c| *c == 0.0));
        }
        assert_eq!(nocs.positions, model.positions);
    }

    #[test]
    fn nocs_degenerate_axis_maps_to_half() {
        let mut model = two_point_model();
        for p in &mut model.positions {
            p[2] = 0.5;
        }
        let nocs = make_nocs_model(&model).unwrap();
        let c = sh::eval_sh(&Vector3::z(), &nocs.sh[0]);
        assert!((c[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validate_catches_bad_fields() {
        let mut m = two_point_model();
        assert!(m.validate().is_ok());
        m.scales[1][0] = 0.0;
        assert!(m.validate().is_err());
        let mut m = two_point_model();
        m.opacities[0] = 1.5;
        assert!(m.validate().is_err());
        let mut m = two_point_model();
        m.rotations[2] = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        assert!(m.validate().is_err());
    }
}
