//! Coarse pose from a NOCS image: bright pixels are decoded to object
//! coordinates and the pose is solved by EPnP inside RANSAC, then polished
//! by Gauss-Newton on the reprojection error.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{exp_se3, hat3};
use crate::registration::kabsch;
use crate::render::{CameraIntrinsics, Frame};
use crate::{Aabb, GaussianModel, RigidTransform, Twist};

/// Fewest correspondences accepted by the solver.
pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub point_m: Vector3<f64>,
}

/// Masked pixels whose largest channel exceeds `threshold`, decoded to
/// object coordinates inside `aabb`.
pub fn nocs_to_correspondences(
    nocs: &Frame,
    mask: Option<&[bool]>,
    aabb: &Aabb,
    threshold: f64,
) -> Result<Vec<Correspondence2D3D>> {
    let mut out = Vec::new();
    for v in 0..nocs.height {
        for u in 0..nocs.width {
            let i = nocs.index(u, v);
            let inside = match mask {
                Some(m) => m[i],
                None => nocs.in_mask(i),
            };
            let c = nocs.rgb_at(i);
            if !inside || c.iter().cloned().fold(f64::MIN, f64::max) <= threshold {
                continue;
            }
            let c = Vector3::from(c).map(|x| x.clamp(0.0, 1.0));
            out.push(Correspondence2D3D {
                pixel: Vector2::new(u as f64, v as f64),
                point_m: aabb.min + c.component_mul(&aabb.extent()),
            });
        }
    }
    if out.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            found: out.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    Ok(out)
}

pub fn write_correspondences_csv(corrs: &[Correspondence2D3D], mut w: impl Write) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(w, "u,v,x,y,z").map_err(io)?;
    for c in corrs {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.pixel.x, c.pixel.y, c.point_m.x, c.point_m.y, c.point_m.z
        )
        .map_err(io)?;
    }
    Ok(())
}

fn reprojection(k: &CameraIntrinsics, t: &RigidTransform, c: &Correspondence2D3D) -> f64 {
    let p = t.transform_point(&c.point_m);
    if p.z <= 0.0 {
        return f64::INFINITY;
    }
    (k.project(&p) - c.pixel).norm()
}

fn rms(k: &CameraIntrinsics, t: &RigidTransform, corrs: &[Correspondence2D3D]) -> f64 {
    let s: f64 = corrs.iter().map(|c| reprojection(k, t, c).powi(2)).sum();
    (s / corrs.len().max(1) as f64).sqrt()
}

/// EPnP: the points are expressed in barycentric coordinates of four
/// control points (three when the points are coplanar), whose camera
/// coordinates lie in the null space of the projection constraints.
pub fn epnp(corrs: &[Correspondence2D3D], k: &CameraIntrinsics) -> Result<RigidTransform> {
    let n = corrs.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences { found: n, required: 4 });
    }
    let pts: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point_m).collect();
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n as f64);
    let mut axes: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    if !(axes[1].0 > 1e-12 * axes[0].0.max(1e-300)) {
        return Err(Error::InsufficientCorrespondences { found: n, required: 4 });
    }
    let planar = axes[2].0 <= 1e-10 * axes[0].0;
    let mut ctrl = vec![centroid];
    for (lam, ax) in axes.iter().take(if planar { 2 } else { 3 }) {
        ctrl.push(centroid + ax * lam.sqrt());
    }
    let nc = ctrl.len();

    // barycentric coordinates: p - c0 = sum_j a_j (c_j - c0), a_0 = 1 - sum
    let basis = Matrix3::from_fn(|r, c| if c + 1 < nc { ctrl[c + 1][r] - ctrl[0][r] } else { 0.0 });
    let alphas: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            let d = p - ctrl[0];
            let a: Vec<f64> = (0..nc - 1)
                .map(|j| {
                    let ax = basis.column(j);
                    ax.dot(&d) / ax.norm_squared()
                })
                .collect();
            let mut full = vec![1.0 - a.iter().sum::<f64>()];
            full.extend(a);
            full
        })
        .collect();

    let dim = 3 * nc;
    let mut m = DMatrix::<f64>::zeros(2 * n, dim);
    for (i, c) in corrs.iter().enumerate() {
        let (u, v) = (c.pixel.x, c.pixel.y);
        for j in 0..nc {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a * k.fx;
            m[(2 * i, 3 * j + 2)] = a * (k.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * k.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (k.cy - v);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null_dim = nc;
    let null: Vec<Vec<Vector3<f64>>> = order[..null_dim]
        .iter()
        .map(|&col| (0..nc).map(|j| Vector3::new(eig.eigenvectors[(3 * j, col)], eig.eigenvectors[(3 * j + 1, col)], eig.eigenvectors[(3 * j + 2, col)])).collect())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|a| (a + 1..nc).map(move |b| (a, b))).collect();
    let dist2: Vec<f64> = pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()).collect();
    // differences of each null vector across every control pair
    let diffs: Vec<Vec<Vector3<f64>>> = null
        .iter()
        .map(|v| pairs.iter().map(|&(a, b)| v[a] - v[b]).collect())
        .collect();

    let max_n = if planar { 2 } else { 3 };
    let mut best: Option<(f64, RigidTransform)> = None;
    for nn in 1..=max_n {
        let Some(betas) = approximate_betas(&diffs, &dist2, nn) else {
            continue;
        };
        let betas = refine_betas(&diffs, &dist2, betas);
        let cam_ctrl: Vec<Vector3<f64>> = (0..nc)
            .map(|j| (0..null_dim).map(|kk| null[kk][j] * betas[kk]).sum())
            .collect();
        let mut cam_pts: Vec<Vector3<f64>> = alphas
            .iter()
            .map(|a| (0..nc).map(|j| cam_ctrl[j] * a[j]).sum())
            .collect();
        if cam_pts.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            cam_pts.iter_mut().for_each(|p| *p = -*p);
        }
        let Ok(t) = kabsch(&pts, &cam_pts) else {
            continue;
        };
        let err = rms(k, &t, corrs);
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, t));
        }
    }
    best.map(|b| b.1)
        .ok_or(Error::InsufficientCorrespondences { found: n, required: 4 })
}

/// Linearised distance constraints using the first `nn` null vectors.
fn approximate_betas(diffs: &[Vec<Vector3<f64>>], dist2: &[f64], nn: usize) -> Option<Vec<f64>> {
    let prods: Vec<(usize, usize)> = (0..nn).flat_map(|a| (a..nn).map(move |b| (a, b))).collect();
    let rows = dist2.len();
    if prods.len() > rows {
        return None;
    }
    let l = DMatrix::from_fn(rows, prods.len(), |r, c| {
        let (a, b) = prods[c];
        let d = diffs[a][r].dot(&diffs[b][r]);
        if a == b {
            d
        } else {
            2.0 * d
        }
    });
    let rho = nalgebra::DVector::from_column_slice(dist2);
    let sol = l.svd(true, true).solve(&rho, 1e-12).ok()?;
    // sol[0] = b0^2, sol[k] = b0 bk for the first row of products
    let b00 = sol[0];
    if !(b00.abs() > 0.0) {
        return None;
    }
    let b0 = b00.abs().sqrt();
    let mut betas = vec![0.0; diffs.len()];
    betas[0] = b0;
    for (c, &(a, b)) in prods.iter().enumerate() {
        if a == 0 && b > 0 {
            betas[b] = sol[c] / b0;
        }
    }
    if b00 < 0.0 {
        // a negative square only arises with the overall sign flipped
        betas.iter_mut().for_each(|x| *x = -*x);
    }
    Some(betas)
}

/// Gauss-Newton on all betas against the exact distance constraints.
fn refine_betas(diffs: &[Vec<Vector3<f64>>], dist2: &[f64], mut betas: Vec<f64>) -> Vec<f64> {
    let nb = betas.len();
    for _ in 0..10 {
        let mut j = DMatrix::zeros(dist2.len(), nb);
        let mut r = nalgebra::DVector::zeros(dist2.len());
        for (row, d2) in dist2.iter().enumerate() {
            let v: Vector3<f64> = (0..nb).map(|kk| diffs[kk][row] * betas[kk]).sum();
            r[row] = v.norm_squared() - d2;
            for kk in 0..nb {
                j[(row, kk)] = 2.0 * v.dot(&diffs[kk][row]);
            }
        }
        let Ok(step) = j.svd(true, true).solve(&r, 1e-12) else {
            break;
        };
        for kk in 0..nb {
            betas[kk] -= step[kk];
        }
        if step.norm() < 1e-14 {
            break;
        }
    }
    betas
}

/// Gauss-Newton (Levenberg-damped) on the reprojection error.
pub fn refine_reprojection(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    t: &RigidTransform,
    iters: usize,
) -> RigidTransform {
    let mut t = *t;
    let mut cost = rms(k, &t, corrs);
    let mut damping = 1e-6;
    for _ in 0..iters {
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            let p = t.transform_point(&c.point_m);
            if p.z <= 0.0 {
                continue;
            }
            let r = k.project(&p) - c.pixel;
            let jp = k.projection_jacobian(&p);
            let mut jt = nalgebra::Matrix3x6::<f64>::zeros();
            jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat3(&p)));
            let j = jp * jt;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut hd = h;
            for d in 0..6 {
                hd[(d, d)] += damping * (1.0 + h[(d, d)]);
            }
            let Some(step) = hd.cholesky().map(|ch| ch.solve(&(-g))) else {
                damping *= 10.0;
                continue;
            };
            let cand = exp_se3(&Twist::from_vector(&step)).compose(&t).orthonormalized();
            let c = rms(k, &cand, corrs);
            if c <= cost {
                let done = cost - c < 1e-12 * cost.max(1e-12);
                t = cand;
                cost = c;
                damping = (damping * 0.3).max(1e-9);
                improved = !done;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnpConfig {
    pub hypotheses: usize,
    /// Inlier reprojection gate in pixels.
    pub gate_px: f64,
    pub min_inliers: usize,
    pub refine_iters: usize,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            hypotheses: 200,
            gate_px: 2.0,
            min_inliers: MIN_CORRESPONDENCES,
            refine_iters: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: RigidTransform,
    pub inliers: Vec<usize>,
    pub rms_px: f64,
}

fn inliers_of(k: &CameraIntrinsics, t: &RigidTransform, corrs: &[Correspondence2D3D], gate: f64) -> Vec<usize> {
    (0..corrs.len()).filter(|&i| reprojection(k, t, &corrs[i]) < gate).collect()
}

/// RANSAC over minimal four-point EPnP samples. The winner (most inliers,
/// then lowest inlier RMS, then earliest hypothesis) is re-solved on its
/// inliers and refined.
pub fn pnp_ransac(corrs: &[Correspondence2D3D], k: &CameraIntrinsics, cfg: &PnpConfig) -> Result<PnpResult> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            found: corrs.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<usize>> = (0..cfg.hypotheses).map(|_| sample(&mut rng, corrs.len(), 4).into_vec()).collect();
    let scored: Vec<Option<(usize, f64, usize, RigidTransform)>> = samples
        .par_iter()
        .enumerate()
        .map(|(h, idx)| {
            let sub: Vec<_> = idx.iter().map(|&i| corrs[i]).collect();
            let t = epnp(&sub, k).ok()?;
            let inl = inliers_of(k, &t, corrs, cfg.gate_px);
            let sel: Vec<_> = inl.iter().map(|&i| corrs[i]).collect();
            Some((inl.len(), rms(k, &t, &sel), h, t))
        })
        .collect();
    let best = scored
        .into_iter()
        .flatten()
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let Some((count, _, _, mut pose)) = best else {
        return Err(Error::RansacFailed {
            best: 0,
            required: cfg.min_inliers,
        });
    };
    if count < cfg.min_inliers {
        return Err(Error::RansacFailed {
            best: count,
            required: cfg.min_inliers,
        });
    }
    let mut inliers = inliers_of(k, &pose, corrs, cfg.gate_px);
    for _ in 0..3 {
        let sel: Vec<_> = inliers.iter().map(|&i| corrs[i]).collect();
        let init = match epnp(&sel, k) {
            Ok(t) if rms(k, &t, &sel) < rms(k, &pose, &sel) => t,
            _ => pose,
        };
        let refined = refine_reprojection(&sel, k, &init, cfg.refine_iters);
        let next = inliers_of(k, &refined, corrs, cfg.gate_px);
        if next.len() < inliers.len() {
            break;
        }
        let stable = next == inliers;
        pose = refined;
        inliers = next;
        if stable {
            break;
        }
    }
    if inliers.len() < cfg.min_inliers {
        return Err(Error::RansacFailed {
            best: inliers.len(),
            required: cfg.min_inliers,
        });
    }
    let sel: Vec<_> = inliers.iter().map(|&i| corrs[i]).collect();
    Ok(PnpResult {
        rms_px: rms(k, &pose, &sel),
        pose,
        inliers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    /// Largest-channel brightness a NOCS pixel needs to be used.
    pub threshold: f64,
    pub pnp: PnpConfig,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            pnp: PnpConfig::default(),
        }
    }
}

/// Pose from a NOCS image of `model` (rendered, or loaded from file).
pub fn coarse_estimate(
    model: &GaussianModel,
    nocs: &Frame,
    k: &CameraIntrinsics,
    cfg: &CoarseConfig,
) -> Result<PnpResult> {
    nocs.check_size(k)?;
    let aabb = model
        .aabb()
        .ok_or_else(|| Error::InvalidModel("model has no Gaussians".into()))?;
    let corrs = nocs_to_correspondences(nocs, None, &aabb, cfg.threshold)?;
    pnp_ransac(&corrs, k, &cfg.pnp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn pose() -> RigidTransform {
        exp_se3(&Twist::new(Vector3::new(0.05, -0.02, 0.8), Vector3::new(0.3, -0.5, 0.2)))
    }

    fn project_all(points: &[Vector3<f64>], t: &RigidTransform) -> Vec<Correspondence2D3D> {
        let k = camera();
        points
            .iter()
            .map(|p| Correspondence2D3D {
                pixel: k.project(&t.transform_point(p)),
                point_m: *p,
            })
            .collect()
    }

    #[test]
    fn epnp_on_exact_general_points() {
        let pts: Vec<_> = (0..12)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.37).sin() * 0.1, (f * 1.3).cos() * 0.08, (f * 0.71).sin() * 0.06)
            })
            .collect();
        let t = pose();
        let est = epnp(&project_all(&pts, &t), &camera()).unwrap();
        assert!((est.rotation - t.rotation).amax() < 1e-6, "{}", est.rotation - t.rotation);
        assert!((est.translation - t.translation).amax() < 1e-6);
    }

    #[test]
    fn epnp_on_exact_planar_points() {
        let pts: Vec<_> = (0..10)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.9).sin() * 0.1, (f * 0.4).cos() * 0.1, 0.0)
            })
            .collect();
        let t = pose();
        let est = epnp(&project_all(&pts, &t), &camera()).unwrap();
        assert!((est.rotation - t.rotation).amax() < 1e-6);
        assert!((est.translation - t.translation).amax() < 1e-6);
    }

    #[test]
    fn correspondences_need_six_pixels() {
        let aabb = Aabb {
            min: Vector3::zeros(),
            max: Vector3::repeat(1.0),
        };
        let f = Frame::blank(4, 4);
        assert!(matches!(
            nocs_to_correspondences(&f, None, &aabb, 0.05),
            Err(Error::InsufficientCorrespondences { found: 0, .. })
        ));
    }
}
