//! Depth correction by ray-cast ICP: a source cloud is cast from the Gaussian
//! centers at the coarse pose, a target cloud is backprojected from the
//! observed depth, and point-to-point ICP aligns the two.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::rotation_angle;
use crate::render::{CameraIntrinsics, Frame};
use crate::{GaussianModel, RigidTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameTag {
    Camera,
    Object,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: FrameTag,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: FrameTag) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform, frame: FrameTag) -> Self {
        Self::new(self.points.iter().map(|p| t.transform_point(p)).collect(), frame)
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |a, p| a + p);
        Some(sum / self.len() as f64)
    }

    /// Gaussian centers in the object frame.
    pub fn from_model(model: &GaussianModel) -> Self {
        Self::new(model.positions.clone(), FrameTag::Object)
    }

    pub fn write_ascii_ply(&self, writer: impl std::io::Write) -> Result<()> {
        crate::scene::ply::write_points_ascii(&self.points, writer)
    }
}

/// Camera-frame points for every masked pixel with positive depth.
pub fn backproject(frame: &Frame, k: &CameraIntrinsics) -> Result<PointCloud> {
    frame.check_size(k)?;
    let mut points = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = frame.index(u, v);
            let d = frame.depth[i];
            if frame.in_mask(i) && d > 0.0 {
                points.push(k.backproject(u as f64, v as f64, d));
            }
        }
    }
    Ok(PointCloud::new(points, FrameTag::Camera))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayCastConfig {
    /// Largest perpendicular distance from a ray that still counts as a hit.
    pub epsilon: f64,
    pub pixel_stride: usize,
}

impl RayCastConfig {
    pub fn new(epsilon: f64, pixel_stride: usize) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("ray-cast epsilon must be positive, got {epsilon}")));
        }
        if pixel_stride == 0 {
            return Err(Error::Config("pixel stride must be at least 1".into()));
        }
        Ok(Self { epsilon, pixel_stride })
    }

    /// Default threshold for `model`: 0.5% of its box diagonal, raised to
    /// the median center spacing so that rays cannot slip between
    /// neighbouring surface Gaussians.
    pub fn for_model(model: &GaussianModel, pixel_stride: usize) -> Result<Self> {
        let diag = model.aabb().map(|b| b.diagonal()).unwrap_or(0.0);
        let eps = (0.005 * diag).max(median_spacing(&model.positions));
        Self::new(if eps > 0.0 { eps } else { 1e-3 }, pixel_stride)
    }
}

/// Median distance from each point to its nearest other point.
pub fn median_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let tree = build_tree(points);
    let mut d: Vec<f64> = points
        .iter()
        .map(|p| {
            let nn = tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], std::num::NonZero::new(2).unwrap());
            nn.iter().map(|n| n.distance).fold(0.0, f64::max).sqrt()
        })
        .collect();
    median(&mut d)
}

fn build_tree(points: &[Vector3<f64>]) -> ImmutableKdTree<f64, 3> {
    let data: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&data)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rays through every `stride`-th masked pixel, in row-major order.
pub fn ray_pixels(frame: &Frame, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut n = 0usize;
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = frame.index(u, v);
            let d = frame.depth[i];
            if frame.in_mask(i) && d > 0.0 {
                if n % stride == 0 {
                    out.push((u, v));
                }
                n += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RayHit {
    pub ray: usize,
    /// Index into the input cloud.
    pub point: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayCast {
    /// One point per hit ray, in camera coordinates.
    pub cloud: PointCloud,
    pub hits: Vec<RayHit>,
}

impl RayCast {
    /// Hit points with repeats removed, in first-hit order.
    pub fn unique_points(&self) -> PointCloud {
        let mut seen = std::collections::HashSet::new();
        let pts = self
            .hits
            .iter()
            .zip(&self.cloud.points)
            .filter(|(h, _)| seen.insert(h.point))
            .map(|(_, p)| *p)
            .collect();
        PointCloud::new(pts, FrameTag::Camera)
    }
}

fn ray_dir(k: &CameraIntrinsics, (u, v): (usize, usize)) -> Vector3<f64> {
    Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0).normalize()
}

/// Distance from `p` to the half-line from the origin along unit `d`.
#[inline]
fn ray_distance(p: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    let t = p.dot(d);
    if t <= 0.0 {
        p.norm()
    } else {
        (p - d * t).norm()
    }
}

/// Hit rule shared by the indexed and brute-force paths: within `eps` of the
/// ray, closest to the camera, lowest index on ties.
#[inline]
fn consider(best: &mut Option<(f64, usize)>, p: &Vector3<f64>, idx: usize, d: &Vector3<f64>, eps: f64) {
    if ray_distance(p, d) < eps {
        let r = p.norm();
        match best {
            Some((br, bi)) if (r, idx) >= (*br, *bi) => {}
            _ => *best = Some((r, idx)),
        }
    }
}

fn collect(cam: &[Vector3<f64>], best: Vec<Option<(f64, usize)>>) -> RayCast {
    let mut hits = Vec::new();
    let mut pts = Vec::new();
    for (ray, b) in best.into_iter().enumerate() {
        if let Some((_, point)) = b {
            hits.push(RayHit { ray, point });
            pts.push(cam[point]);
        }
    }
    RayCast {
        cloud: PointCloud::new(pts, FrameTag::Camera),
        hits,
    }
}

fn to_camera(model_points: &PointCloud, t: &RigidTransform) -> Vec<Vector3<f64>> {
    match model_points.frame {
        FrameTag::Object => model_points.points.iter().map(|p| t.transform_point(p)).collect(),
        FrameTag::Camera => model_points.points.clone(),
    }
}

/// Casts one ray per pixel from the camera center and keeps, for each ray,
/// the point nearest the camera among those within `epsilon` of it.
/// Object-frame clouds are moved into the camera frame by `t` first.
///
/// Candidates are found by splatting each point into the pixels its
/// `epsilon` ball can reach on the image plane, then tested exactly.
pub fn raycast_source(
    model_points: &PointCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    pixels: &[(usize, usize)],
    cfg: &RayCastConfig,
) -> RayCast {
    let cam = to_camera(model_points, t);
    let eps = cfg.epsilon;
    let dirs: Vec<Vector3<f64>> = pixels.iter().map(|px| ray_dir(k, *px)).collect();
    let mut best = vec![None; pixels.len()];
    if pixels.is_empty() {
        return collect(&cam, best);
    }

    let (u0, u1) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (v0, v1) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let gw = u1 - u0 + 1;
    let mut grid = vec![usize::MAX; gw * (v1 - v0 + 1)];
    for (r, &(u, v)) in pixels.iter().enumerate() {
        let cell = &mut grid[(v - v0) * gw + (u - u0)];
        if *cell == usize::MAX {
            *cell = r;
        }
    }
    // A ray with unnormalised direction D = (x, y, 1) passes within eps of a
    // point at depth z only if their normalised image coordinates differ by
    // less than eps |D| / z.
    let d_max = [(u0, v0), (u0, v1), (u1, v0), (u1, v1)]
        .iter()
        .map(|&(u, v)| Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0).norm())
        .fold(1.0, f64::max);
    let z_min = eps;
    let mut near = Vec::new();

    for (idx, p) in cam.iter().enumerate() {
        if p.z <= z_min {
            near.push(idx);
            continue;
        }
        let reach = eps * d_max / p.z;
        let (ru, rv) = (reach * k.fx + 1.0, reach * k.fy + 1.0);
        let pu = k.fx * p.x / p.z + k.cx;
        let pv = k.fy * p.y / p.z + k.cy;
        let lo_u = (pu - ru).ceil().max(u0 as f64);
        let hi_u = (pu + ru).floor().min(u1 as f64);
        let lo_v = (pv - rv).ceil().max(v0 as f64);
        let hi_v = (pv + rv).floor().min(v1 as f64);
        if lo_u > hi_u || lo_v > hi_v {
            continue;
        }
        for v in lo_v as usize..=hi_v as usize {
            for u in lo_u as usize..=hi_u as usize {
                let r = grid[(v - v0) * gw + (u - u0)];
                if r != usize::MAX {
                    consider(&mut best[r], p, idx, &dirs[r], eps);
                }
            }
        }
    }
    for idx in near {
        for (r, d) in dirs.iter().enumerate() {
            consider(&mut best[r], &cam[idx], idx, d, eps);
        }
    }
    // duplicate pixels share the first ray's answer
    for (r, &(u, v)) in pixels.iter().enumerate() {
        let first = grid[(v - v0) * gw + (u - u0)];
        if first != r {
            best[r] = best[first];
        }
    }
    collect(&cam, best)
}

/// Reference ray cast testing every point against every ray.
pub fn raycast_source_brute(
    model_points: &PointCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    pixels: &[(usize, usize)],
    cfg: &RayCastConfig,
) -> RayCast {
    let cam = to_camera(model_points, t);
    let best = pixels
        .iter()
        .map(|px| {
            let d = ray_dir(k, *px);
            let mut b = None;
            for (idx, p) in cam.iter().enumerate() {
                consider(&mut b, p, idx, &d, cfg.epsilon);
            }
            b
        })
        .collect();
    collect(&cam, best)
}

/// Nearest-neighbour index over a fixed cloud.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        Self { tree: build_tree(points) }
    }

    /// Index of and distance to the nearest stored point.
    pub fn nearest(&self, p: &Vector3<f64>) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]);
        (nn.item as usize, nn.distance.sqrt())
    }
}

/// Index of and distance to the nearest point by exhaustive search.
pub fn nearest_brute(points: &[Vector3<f64>], p: &Vector3<f64>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Mean distance from each `source` point to its nearest `target` point.
pub fn mean_nn_distance(source: &[Vector3<f64>], target: &NearestIndex) -> f64 {
    if source.is_empty() {
        return f64::INFINITY;
    }
    source.iter().map(|p| target.nearest(p).1).sum::<f64>() / source.len() as f64
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]` (Kabsch).
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::InsufficientCorrespondences { found: n.min(dst.len()), required: 3 });
    }
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose();
    Ok(RigidTransform::from_parts(r, cd - r * cs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the update moves the cloud by less than this (meters).
    pub tol: f64,
    /// Pairs farther apart than this multiple of the median pair distance
    /// are dropped from each update.
    pub gate: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            gate: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    /// Mean nearest-neighbour distance before the first and after every
    /// accepted update; non-increasing.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Point-to-point ICP. An update is accepted only if it does not increase
/// the mean nearest-neighbour distance, so the residual never grows.
pub fn icp(source: &PointCloud, target: &PointCloud, cfg: &IcpConfig) -> Result<IcpResult> {
    let index = NearestIndex::new(&target.points);
    icp_indexed(&source.points, &target.points, &index, cfg)
}

fn icp_indexed(src: &[Vector3<f64>], tgt: &[Vector3<f64>], index: &NearestIndex, cfg: &IcpConfig) -> Result<IcpResult> {
    if src.len() < 3 || tgt.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            found: src.len().min(tgt.len()),
            required: 3,
        });
    }
    let mut t = RigidTransform::identity();
    let mut moved: Vec<Vector3<f64>> = src.to_vec();
    let mut residual = mean_nn_distance(&moved, index);
    let mut residuals = vec![residual];
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let pairs: Vec<(usize, usize, f64)> = moved
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d) = index.nearest(p);
                (i, j, d)
            })
            .collect();
        let mut ds: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let gate = cfg.gate * median(&mut ds);
        let (a, b): (Vec<_>, Vec<_>) = pairs
            .iter()
            .filter(|p| p.2 <= gate)
            .map(|&(i, j, _)| (moved[i], tgt[j]))
            .unzip();
        let Ok(step) = kabsch(&a, &b) else {
            break;
        };
        let next: Vec<Vector3<f64>> = moved.iter().map(|p| step.transform_point(p)).collect();
        let r = mean_nn_distance(&next, index);
        if r > residual {
            converged = true;
            break;
        }
        let shift = moved.iter().zip(&next).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        moved = next;
        t = step.compose(&t);
        residual = r;
        residuals.push(r);
        if shift < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform: t.orthonormalized(),
        residuals,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsIcpConfig {
    /// Ray-hit threshold; `None` uses [`RayCastConfig::for_model`].
    pub epsilon: Option<f64>,
    pub pixel_stride: usize,
    pub icp: IcpConfig,
    /// Corrections rotating by more than this are treated as divergence.
    pub max_rotation_deg: f64,
    /// Final residuals above this fraction of the model diameter are
    /// treated as divergence.
    pub max_residual_frac: f64,
}

impl Default for GsIcpConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            pixel_stride: 2,
            icp: IcpConfig::default(),
            max_rotation_deg: 30.0,
            max_residual_frac: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsIcpStatus {
    Aligned,
    /// Nothing was hit by the rays, or the frame has no valid depth.
    EmptySource,
    /// ICP moved away from a plausible answer; the input pose is returned.
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsIcpResult {
    pub pose: RigidTransform,
    /// Camera-frame correction, `pose = delta * input`.
    pub delta: RigidTransform,
    pub status: GsIcpStatus,
    pub residual_before: f64,
    pub residual_after: f64,
    pub source_points: usize,
    pub target_points: usize,
    pub iterations: usize,
}

impl GsIcpResult {
    fn passthrough(t: &RigidTransform, status: GsIcpStatus, residual: f64, src: usize, tgt: usize) -> Self {
        Self {
            pose: *t,
            delta: RigidTransform::identity(),
            status,
            residual_before: residual,
            residual_after: residual,
            source_points: src,
            target_points: tgt,
            iterations: 0,
        }
    }
}

/// Corrects `t_coarse` by aligning Gaussian centers hit by rays through the
/// observed mask with the backprojected observed depth. Never returns a pose
/// whose source cloud sits farther from the target than the input's.
pub fn gs_icp(
    model: &GaussianModel,
    frame: &Frame,
    k: &CameraIntrinsics,
    t_coarse: &RigidTransform,
    cfg: &GsIcpConfig,
) -> Result<GsIcpResult> {
    let rc = match cfg.epsilon {
        Some(e) => RayCastConfig::new(e, cfg.pixel_stride)?,
        None => RayCastConfig::for_model(model, cfg.pixel_stride)?,
    };
    let target = backproject(frame, k)?;
    let pixels = ray_pixels(frame, rc.pixel_stride);
    let cast = raycast_source(&PointCloud::from_model(model), t_coarse, k, &pixels, &rc);
    let source = cast.unique_points();
    if source.len() < 3 || target.len() < 3 {
        return Ok(GsIcpResult::passthrough(
            t_coarse,
            GsIcpStatus::EmptySource,
            f64::INFINITY,
            source.len(),
            target.len(),
        ));
    }
    let index = NearestIndex::new(&target.points);
    let res = icp_indexed(&source.points, &target.points, &index, &cfg.icp)?;
    let before = res.residuals[0];
    let after = *res.residuals.last().unwrap();
    let angle = rotation_angle(&res.transform.rotation).to_degrees();
    let diverged = after > before
        || angle > cfg.max_rotation_deg
        || after > cfg.max_residual_frac * model.diameter();
    if diverged {
        let mut out = GsIcpResult::passthrough(t_coarse, GsIcpStatus::Diverged, before, source.len(), target.len());
        out.iterations = res.residuals.len() - 1;
        return Ok(out);
    }
    Ok(GsIcpResult {
        pose: res.transform.compose(t_coarse).orthonormalized(),
        delta: res.transform,
        status: GsIcpStatus::Aligned,
        residual_before: before,
        residual_after: after,
        source_points: source.len(),
        target_points: target.len(),
        iterations: res.residuals.len() - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 31.5, 31.5, 64, 64).unwrap()
    }

    #[test]
    fn point_on_ray_is_hit() {
        let k = cam();
        let d = ray_dir(&k, (40, 20));
        let pc = PointCloud::new(vec![d * 3.0], FrameTag::Camera);
        let cfg = RayCastConfig::new(1e-3, 1).unwrap();
        let rc = raycast_source(&pc, &RigidTransform::identity(), &k, &[(40, 20)], &cfg);
        assert_eq!(rc.hits, vec![RayHit { ray: 0, point: 0 }]);
    }

    #[test]
    fn nearest_of_two_on_a_ray_wins() {
        let k = cam();
        let d = ray_dir(&k, (10, 50));
        let pc = PointCloud::new(vec![d * 5.0, d * 2.0], FrameTag::Camera);
        let cfg = RayCastConfig::new(1e-3, 1).unwrap();
        let rc = raycast_source(&pc, &RigidTransform::identity(), &k, &[(10, 50)], &cfg);
        assert_eq!(rc.hits[0].point, 1);
        assert!((rc.cloud.points[0].norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn points_behind_the_camera_are_missed() {
        let k = cam();
        let pc = PointCloud::new(vec![Vector3::new(0.0, 0.0, -2.0)], FrameTag::Camera);
        let cfg = RayCastConfig::new(1e-3, 1).unwrap();
        let rc = raycast_source(&pc, &RigidTransform::identity(), &k, &[(31, 31)], &cfg);
        assert!(rc.hits.is_empty());
    }

    #[test]
    fn kabsch_recovers_transform() {
        let t = crate::lie::exp_se3(&crate::Twist::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.4, 0.1, -0.3)));
        let src: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, (i * i) as f64 * 0.01, (i % 3) as f64 * 0.2))
            .collect();
        let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
        let est = kabsch(&src, &dst).unwrap();
        assert!((est.rotation - t.rotation).amax() < 1e-12);
        assert!((est.translation - t.translation).amax() < 1e-12);
    }

    #[test]
    fn median_spacing_of_a_line() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64 * 0.5, 0.0, 0.0)).collect();
        assert!((median_spacing(&pts) - 0.5).abs() < 1e-12);
    }
}
