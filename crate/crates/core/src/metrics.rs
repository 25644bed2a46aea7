//! Pose accuracy: ADD, ADD-S, rotation and translation errors, success
//! rates and angular error histograms. All thresholds are strict.

use std::io::Write;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{vee3, RigidTransform};
use crate::scalar::{lit, to_f64, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_m: f64,
    pub add: f64,
    pub add_s: f64,
}

fn non_empty<T>(points: &[T]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidModel("metric needs at least one point".into()));
    }
    Ok(())
}

/// Mean distance between each point under the two poses.
pub fn add<T: Real>(points: &[Vector3<T>], gt: &RigidTransform<T>, est: &RigidTransform<T>) -> Result<T> {
    non_empty(points)?;
    let sum = points
        .iter()
        .fold(T::zero(), |s, p| s + (gt.transform_point(p) - est.transform_point(p)).norm());
    Ok(sum / lit(points.len() as f64))
}

/// Mean distance from each ground-truth-posed point to the nearest
/// estimate-posed point (exhaustive search).
pub fn add_s<T: Real>(points: &[Vector3<T>], gt: &RigidTransform<T>, est: &RigidTransform<T>) -> Result<T> {
    non_empty(points)?;
    let moved: Vec<Vector3<T>> = points.iter().map(|p| est.transform_point(p)).collect();
    let mut sum = T::zero();
    for p in points {
        let g = gt.transform_point(p);
        let mut best = (moved[0] - g).norm_squared();
        for q in &moved[1..] {
            let d = (q - g).norm_squared();
            if d < best {
                best = d;
            }
        }
        sum += best.sqrt();
    }
    Ok(sum / lit(points.len() as f64))
}

/// Geodesic angle between two rotations, in radians, from the
/// `atan2(|sin|, cos)` form of the relative rotation.
pub fn rotation_error<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let r = a.transpose() * b;
    let s = vee3(&(r - r.transpose())).norm() * lit(0.5);
    let c = (r.trace() - T::one()) * lit(0.5);
    s.atan2(c)
}

/// Geodesic angle via unit quaternions, `2 acos |<q1, q2>|`.
pub fn rotation_error_quat<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let qa = UnitQuaternion::from_matrix(a);
    let qb = UnitQuaternion::from_matrix(b);
    let d = qa.coords.dot(&qb.coords).abs().min(T::one());
    lit::<T>(2.0) * d.acos()
}

/// Rotation (degrees) and translation (meters) parts of a [`PoseError`];
/// ADD fields are zero.
pub fn pose_errors<T: Real>(gt: &RigidTransform<T>, est: &RigidTransform<T>) -> PoseError {
    PoseError {
        rotation_deg: to_f64(rotation_error(&gt.rotation, &est.rotation)).to_degrees(),
        translation_m: to_f64((gt.translation - est.translation).norm()),
        add: 0.0,
        add_s: 0.0,
    }
}

/// All four errors.
pub fn full_errors<T: Real>(points: &[Vector3<T>], gt: &RigidTransform<T>, est: &RigidTransform<T>) -> Result<PoseError> {
    let mut e = pose_errors(gt, est);
    e.add = to_f64(add(points, gt, est)?);
    e.add_s = to_f64(add_s(points, gt, est)?);
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// ADD(-S) must be below this fraction of the diameter.
    pub add_fraction: f64,
    pub rotation_deg: f64,
    pub translation_m: f64,
    /// Use ADD-S instead of ADD.
    pub symmetric: bool,
    /// Histogram range; larger errors go to the last bin.
    pub histogram_max_deg: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            add_fraction: 0.1,
            rotation_deg: 5.0,
            translation_m: 0.01,
            symmetric: false,
            histogram_max_deg: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub count: usize,
    pub diameter: f64,
    pub thresholds: Thresholds,
    pub add_rate: f64,
    pub rotation_rate: f64,
    pub rotation_translation_rate: f64,
    /// Over finite rotation errors; `None` when there are none.
    pub mean_rotation_deg: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    /// Counts for `[i, i + 1)` degrees, plus a final overflow bin.
    pub histogram: Vec<usize>,
}

pub fn success_report(errors: &[PoseError], diameter: f64, th: &Thresholds) -> Result<SuccessReport> {
    non_empty(errors)?;
    let n = errors.len() as f64;
    let rate = |f: &dyn Fn(&PoseError) -> bool| errors.iter().filter(|e| f(e)).count() as f64 / n;
    let add_limit = th.add_fraction * diameter;
    let mut hist = vec![0; th.histogram_max_deg + 1];
    for e in errors {
        let bin = if e.rotation_deg.is_finite() {
            (e.rotation_deg.max(0.0).floor() as usize).min(th.histogram_max_deg)
        } else {
            th.histogram_max_deg
        };
        hist[bin] += 1;
    }
    let mut rot: Vec<f64> = errors.iter().map(|e| e.rotation_deg).filter(|r| r.is_finite()).collect();
    rot.sort_by(f64::total_cmp);
    let m = rot.len();
    let median = match m {
        0 => None,
        _ if m % 2 == 1 => Some(rot[m / 2]),
        _ => Some(0.5 * (rot[m / 2 - 1] + rot[m / 2])),
    };
    Ok(SuccessReport {
        count: errors.len(),
        diameter,
        thresholds: *th,
        add_rate: rate(&|e| (if th.symmetric { e.add_s } else { e.add }) < add_limit),
        rotation_rate: rate(&|e| e.rotation_deg < th.rotation_deg),
        rotation_translation_rate: rate(&|e| e.rotation_deg < th.rotation_deg && e.translation_m < th.translation_m),
        mean_rotation_deg: (m > 0).then(|| rot.iter().sum::<f64>() / m as f64),
        median_rotation_deg: median,
        histogram: hist,
    })
}

impl SuccessReport {
    pub fn write_histogram_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        writeln!(w, "bin_start_deg,bin_end_deg,count").map_err(io)?;
        let last = self.histogram.len() - 1;
        for (i, c) in self.histogram.iter().enumerate() {
            if i == last {
                writeln!(w, "{i},inf,{c}").map_err(io)?;
            } else {
                writeln!(w, "{i},{},{c}", i + 1).map_err(io)?;
            }
        }
        Ok(())
    }
}
