//! Tile-binned CPU rasterizer with front-to-back alpha compositing and its
//! reverse-mode derivative with respect to the projected splat parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{CameraIntrinsics, Frame, Z_NEAR};
use crate::error::{Error, Result};
use crate::scene::sh::{self, SH_COLOR_OFFSET};
use crate::scene::Aabb;
use crate::{GaussianModel, RigidTransform};

/// Support radius of a splat in Mahalanobis units. The falloff is shifted
/// down by its value on this ellipse and rescaled, so it reaches zero there
/// continuously.
pub const SPLAT_EXTENT_SIGMAS: f64 = 3.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Pixels whose accumulated opacity is below this get depth 0 and are
/// outside the rendered mask.
pub const ALPHA_MASK_THRESHOLD: f64 = 0.5;

const TILE: usize = 4;
/// Contributions with smaller opacity are skipped.
const MIN_ALPHA: f64 = 1e-12;
const CUTOFF_Q: f64 = SPLAT_EXTENT_SIGMAS * SPLAT_EXTENT_SIGMAS;
/// `exp(-CUTOFF_Q / 2)`.
const CUTOFF_FLOOR: f64 = 0.011_108_996_538_242_306;

/// Splat falloff at squared Mahalanobis distance `q`, and its derivative
/// with respect to `q`.
#[inline]
fn falloff(q: f64) -> (f64, f64) {
    if q >= CUTOFF_Q {
        return (0.0, 0.0);
    }
    let g = (-0.5 * q).exp();
    let norm = 1.0 / (1.0 - CUTOFF_FLOOR);
    ((g - CUTOFF_FLOOR) * norm, -0.5 * g * norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Color,
    Depth,
    /// Colors encode normalized object coordinates, normalized by the
    /// accumulated opacity.
    Nocs,
    All,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum ColorSource {
    Sh,
    Nocs(Aabb<f64>),
}

/// Per-Gaussian state after projection, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub gaussian: usize,
    pub p_c: Vector3<f64>,
    pub mean: Vector2<f64>,
    /// Inverse 2D covariance `[[a, b], [b, c]]` as `(a, b, c)`.
    pub conic: [f64; 3],
    pub j: Matrix2x3<f64>,
    /// Covariance rotated into the camera frame.
    pub cov_cam: Matrix3<f64>,
    pub cov_obj: Matrix3<f64>,
    /// Unit viewing direction in the object frame (camera center to Gaussian).
    pub view_dir: Vector3<f64>,
    pub view_len: f64,
    pub color: [f64; 3],
    /// Channels whose color is not clamped.
    pub color_active: [bool; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds `x0, x1, y0, y1`.
    bbox: [usize; 4],
}

/// Accumulated per-pixel sums: color, opacity-weighted depth, opacity.
#[derive(Clone, Debug)]
pub(crate) struct Accum {
    pub color: Vec<f64>,
    pub depth_sum: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Gradients of the loss with respect to the [`Accum`] buffers.
#[derive(Clone, Debug)]
pub(crate) struct Upstream {
    pub color: Vec<f64>,
    pub depth_sum: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Gradient with respect to one projected splat.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub depth: f64,
}

/// The fields compositing reads, packed together.
#[derive(Clone, Copy, Debug)]
struct Hot {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    z: f64,
    bbox: [u32; 4],
}

pub(crate) struct Raster {
    width: usize,
    height: usize,
    tiles_x: usize,
    /// Splats sorted front to back.
    pub splats: Vec<Projected>,
    hot: Vec<Hot>,
    /// Per tile, indices into `splats` in depth order.
    tiles: Vec<Vec<u32>>,
}

impl Raster {
    pub fn build(
        model: &GaussianModel,
        t: &RigidTransform,
        k: &CameraIntrinsics,
        source: ColorSource,
    ) -> Result<Self> {
        if model.is_empty() {
            return Err(Error::InvalidModel("model has no Gaussians".into()));
        }
        let cam_center = -(t.rotation.transpose() * t.translation);
        let rt = t.rotation.transpose();
        let mut splats = Vec::new();
        for i in 0..model.len() {
            let mu = &model.positions[i];
            let p_c = t.transform_point(mu);
            if !(p_c.z > Z_NEAR) {
                continue;
            }
            let cov_obj = model.covariance_of(i)?;
            let j = k.projection_jacobian(&p_c);
            let cov_cam = t.rotation * cov_obj * rt;
            let cov2 = j * cov_cam * j.transpose();
            let (a, b, c) = (cov2[(0, 0)], 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]), cov2[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 1e-18) {
                continue;
            }
            let mean = k.project(&p_c);
            let (rx, ry) = (SPLAT_EXTENT_SIGMAS * a.sqrt(), SPLAT_EXTENT_SIGMAS * c.sqrt());
            let x0 = (mean.x - rx).ceil().max(0.0);
            let x1 = (mean.x + rx).floor().min(k.width as f64 - 1.0);
            let y0 = (mean.y - ry).ceil().max(0.0);
            let y1 = (mean.y + ry).floor().min(k.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }

            let v = mu - cam_center;
            let view_len = v.norm();
            let view_dir = if view_len > 0.0 { v / view_len } else { Vector3::z() };
            let (color, color_active) = match source {
                ColorSource::Sh => {
                    let raw = sh::eval_sh_raw(&view_dir, &model.sh[i]);
                    let mut color = [0.0; 3];
                    let mut active = [false; 3];
                    for ch in 0..3 {
                        let v = raw[ch] + SH_COLOR_OFFSET;
                        color[ch] = v.clamp(0.0, 1.0);
                        active[ch] = (0.0..=1.0).contains(&v);
                    }
                    (color, active)
                }
                ColorSource::Nocs(aabb) => {
                    let c = aabb.normalize(mu);
                    ([c.x, c.y, c.z], [false; 3])
                }
            };

            splats.push(Projected {
                gaussian: i,
                p_c,
                mean,
                conic: [c / det, -b / det, a / det],
                j,
                cov_cam,
                cov_obj,
                view_dir,
                view_len,
                color,
                color_active,
                opacity: model.opacities[i],
                bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
            });
        }
        // front to back; ties broken by Gaussian index for determinism
        let mut order: Vec<(f64, usize, usize)> = splats.iter().enumerate().map(|(i, s)| (s.p_c.z, s.gaussian, i)).collect();
        order.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
        let splats: Vec<Projected> = order.iter().map(|o| splats[o.2].clone()).collect();
        let hot = splats
            .iter()
            .map(|s| Hot {
                mean: [s.mean.x, s.mean.y],
                conic: s.conic,
                opacity: s.opacity,
                color: s.color,
                z: s.p_c.z,
                bbox: s.bbox.map(|b| b as u32),
            })
            .collect();

        let tiles_x = k.width.div_ceil(TILE);
        let tiles_y = k.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (si, s) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
        Ok(Self {
            width: k.width,
            height: k.height,
            tiles_x,
            splats,
            hot,
            tiles,
        })
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    /// Calls `visit(splat index, alpha, transmittance, d falloff / dq, dx, dy)` for
    /// every splat composited at pixel `(u, v)`, front to back.
    #[inline]
    fn composite_pixel(&self, u: usize, v: usize, mut visit: impl FnMut(u32, f64, f64, f64, f64, f64)) {
        let tile = (v / TILE) * self.tiles_x + u / TILE;
        let (px, py) = (u as f64, v as f64);
        let mut trans = 1.0;
        let (uu, vv) = (u as u32, v as u32);
        for &si in &self.tiles[tile] {
            let s = &self.hot[si as usize];
            let [x0, x1, y0, y1] = s.bbox;
            if uu < x0 || uu > x1 || vv < y0 || vv > y1 {
                continue;
            }
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            let [a, b, c] = s.conic;
            let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            let (fall, d_fall) = falloff(q);
            let alpha = s.opacity * fall;
            if alpha < MIN_ALPHA {
                continue;
            }
            visit(si, alpha, trans, d_fall, dx, dy);
            trans *= 1.0 - alpha;
            if trans < TRANSMITTANCE_EPS {
                break;
            }
        }
    }

    pub fn forward(&self) -> Accum {
        let (w, h) = (self.width, self.height);
        let mut color = vec![0.0; w * h * 3];
        let mut depth_sum = vec![0.0; w * h];
        let mut alpha = vec![0.0; w * h];
        color
            .par_chunks_mut(TILE * w * 3)
            .zip(depth_sum.par_chunks_mut(TILE * w))
            .zip(alpha.par_chunks_mut(TILE * w))
            .enumerate()
            .for_each(|(band, ((color, depth_sum), alpha))| {
                let v0 = band * TILE;
                let rows = alpha.len() / w;
                for dv in 0..rows {
                    for u in 0..w {
                        let local = dv * w + u;
                        let mut acc = [0.0; 5];
                        self.composite_pixel(u, v0 + dv, |si, a, trans, _, _, _| {
                            let s = &self.hot[si as usize];
                            let wgt = a * trans;
                            acc[0] += wgt * s.color[0];
                            acc[1] += wgt * s.color[1];
                            acc[2] += wgt * s.color[2];
                            acc[3] += wgt * s.z;
                            acc[4] += wgt;
                        });
                        color[3 * local..3 * local + 3].copy_from_slice(&acc[..3]);
                        depth_sum[local] = acc[3];
                        alpha[local] = acc[4];
                    }
                }
            });
        Accum {
            color,
            depth_sum,
            alpha,
        }
    }

    /// Reverse pass. Per-band partial gradients are summed in band order so
    /// the result does not depend on scheduling.
    pub fn backward(&self, up: &Upstream) -> Vec<SplatGrad> {
        let (w, h) = (self.width, self.height);
        let n = self.splats.len();
        let bands = h.div_ceil(TILE);
        let live = |i: usize| {
            up.color[3 * i..3 * i + 3].iter().any(|x| *x != 0.0) || up.depth_sum[i] != 0.0 || up.alpha[i] != 0.0
        };
        let partials: Vec<Vec<SplatGrad>> = (0..bands)
            .into_par_iter()
            .filter(|band| (band * TILE * w..((band + 1) * TILE).min(h) * w).any(live))
            .map(|band| {
                let mut grads = vec![SplatGrad::default(); n];
                let mut hits: Vec<(u32, f64, f64, f64, f64, f64)> = Vec::new();
                let v0 = band * TILE;
                for v in v0..(v0 + TILE).min(h) {
                    for u in 0..w {
                        let i = v * w + u;
                        let g = [
                            up.color[3 * i],
                            up.color[3 * i + 1],
                            up.color[3 * i + 2],
                            up.depth_sum[i],
                            up.alpha[i],
                        ];
                        if g.iter().all(|x| *x == 0.0) {
                            continue;
                        }
                        hits.clear();
                        self.composite_pixel(u, v, |si, a, trans, fall, dx, dy| {
                            hits.push((si, a, trans, fall, dx, dy));
                        });
                        // composite of everything behind the current splat,
                        // starting from full transmittance
                        let mut behind = [0.0; 5];
                        for &(si, a, trans, fall, dx, dy) in hits.iter().rev() {
                            let s = &self.hot[si as usize];
                            let f = [s.color[0], s.color[1], s.color[2], s.z, 1.0];
                            let mut d_alpha = 0.0;
                            for c in 0..5 {
                                d_alpha += g[c] * (f[c] - behind[c]);
                            }
                            d_alpha *= trans;
                            for c in 0..5 {
                                behind[c] = a * f[c] + (1.0 - a) * behind[c];
                            }
                            let wgt = a * trans;
                            let sg = &mut grads[si as usize];
                            sg.color[0] += wgt * g[0];
                            sg.color[1] += wgt * g[1];
                            sg.color[2] += wgt * g[2];
                            sg.depth += wgt * g[3];

                            // dL/dq; q = d^T C d with d = pixel - mean
                            let d_q = s.opacity * d_alpha * fall;
                            let [ca, cb, cc] = s.conic;
                            sg.mean[0] -= 2.0 * d_q * (ca * dx + cb * dy);
                            sg.mean[1] -= 2.0 * d_q * (cb * dx + cc * dy);
                            sg.conic[0] += d_q * dx * dx;
                            sg.conic[1] += d_q * 2.0 * dx * dy;
                            sg.conic[2] += d_q * dy * dy;
                        }
                    }
                }
                grads
            })
            .collect();

        let mut total = vec![SplatGrad::default(); n];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                t.mean[0] += p.mean[0];
                t.mean[1] += p.mean[1];
                for c in 0..3 {
                    t.conic[c] += p.conic[c];
                    t.color[c] += p.color[c];
                }
                t.depth += p.depth;
            }
        }
        total
    }

    /// Converts accumulated buffers into a frame.
    pub fn to_frame(&self, acc: &Accum, mode: RenderMode) -> Frame {
        let (w, h) = (self.width, self.height);
        let mut frame = Frame::blank(w, h);
        let mut mask = vec![false; w * h];
        for i in 0..w * h {
            let a = acc.alpha[i];
            let covered = a >= ALPHA_MASK_THRESHOLD;
            mask[i] = covered;
            if matches!(mode, RenderMode::Depth | RenderMode::All) && covered {
                frame.depth[i] = acc.depth_sum[i] / a;
            }
            match mode {
                RenderMode::Color | RenderMode::All => {
                    for c in 0..3 {
                        frame.rgb[3 * i + c] = acc.color[3 * i + c].clamp(0.0, 1.0);
                    }
                }
                RenderMode::Nocs if covered => {
                    for c in 0..3 {
                        frame.rgb[3 * i + c] = (acc.color[3 * i + c] / a).clamp(0.0, 1.0);
                    }
                }
                _ => {}
            }
        }
        frame.mask = Some(mask);
        frame.alpha = Some(acc.alpha.clone());
        frame
    }
}

/// Renders `model` seen through pose `t` (object to camera).
pub fn rasterize(
    model: &GaussianModel,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    mode: RenderMode,
) -> Result<Frame> {
    k.validate()?;
    let source = match mode {
        RenderMode::Nocs => ColorSource::Nocs(
            model
                .aabb()
                .ok_or_else(|| Error::InvalidModel("model has no Gaussians".into()))?,
        ),
        _ => ColorSource::Sh,
    };
    let raster = Raster::build(model, t, k, source)?;
    let acc = raster.forward();
    Ok(raster.to_frame(&acc, mode))
}

/// 2D covariance of a projected splat, recovered from its conic.
#[allow(dead_code)]
pub(crate) fn conic_to_cov(conic: [f64; 3]) -> Matrix2<f64> {
    Matrix2::new(conic[0], conic[1], conic[1], conic[2])
        .try_inverse()
        .unwrap_or_else(Matrix2::zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sh::{dc_from_color, SH_COEFFS};
    use nalgebra::Quaternion;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 31.0, 31.0, 64, 64).unwrap()
    }

    fn single(pos: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> GaussianModel {
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for c in 0..3 {
            sh[c][0] = dc_from_color(color[c]);
        }
        GaussianModel {
            positions: vec![pos],
            rotations: vec![Quaternion::identity()],
            scales: vec![Vector3::repeat(scale)],
            opacities: vec![opacity],
            sh: vec![sh],
        }
    }

    #[test]
    fn single_gaussian_on_axis() {
        let k = camera();
        let model = single(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.999, [0.8, 0.6, 0.4]);
        let f = rasterize(&model, &RigidTransform::identity(), &k, RenderMode::All).unwrap();
        let alpha = f.alpha.as_ref().unwrap();
        let (mut best, mut arg) = (0.0, 0);
        for i in 0..f.pixel_count() {
            if f.rgb[3 * i] > best {
                best = f.rgb[3 * i];
                arg = i;
            }
        }
        assert_eq!(arg, f.index(31, 31));
        assert!((f.depth[arg] - 2.0).abs() < 1e-3);
        assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(f.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn model_behind_camera_renders_nothing() {
        let k = camera();
        let model = single(Vector3::new(0.0, 0.0, -2.0), 0.05, 0.9, [0.8, 0.6, 0.4]);
        let f = rasterize(&model, &RigidTransform::identity(), &k, RenderMode::All).unwrap();
        assert!(f.rgb.iter().all(|c| *c == 0.0));
        assert!(f.depth.iter().all(|c| *c == 0.0));
        assert!(f.mask.unwrap().iter().all(|m| !m));
    }

    #[test]
    fn two_splat_compositing_matches_closed_form() {
        let k = camera();
        let near = single(Vector3::new(0.0, 0.0, 1.0), 0.02, 1.0, [1.0, 0.0, 0.0]);
        let far = single(Vector3::new(0.01, 0.0, 2.0), 0.03, 0.7, [0.0, 1.0, 0.0]);
        let mut model = near.clone();
        model.positions.push(far.positions[0]);
        model.rotations.push(far.rotations[0]);
        model.scales.push(far.scales[0]);
        model.opacities.push(far.opacities[0]);
        model.sh.push(far.sh[0]);

        let id = RigidTransform::identity();
        let f = rasterize(&model, &id, &k, RenderMode::All).unwrap();
        let sn = project_one(&model, 0, &k);
        let sf = project_one(&model, 1, &k);
        for v in 0..k.height {
            for u in 0..k.width {
                let (an, inside_n) = splat_alpha(&sn, u, v);
                let (af, inside_f) = splat_alpha(&sf, u, v);
                let an = if inside_n { an } else { 0.0 };
                let af = if inside_f { af } else { 0.0 };
                // early termination hides the far splat behind a saturated near one
                let af = if 1.0 - an < TRANSMITTANCE_EPS { 0.0 } else { af };
                let red = an;
                let green = (1.0 - an) * af;
                let i = f.index(u, v);
                assert!((f.rgb[3 * i] - red).abs() < 1e-12, "({u},{v})");
                assert!((f.rgb[3 * i + 1] - green).abs() < 1e-12, "({u},{v})");
            }
        }
        // at the near splat's center its opacity is 1: the far one is invisible
        let c = f.index(31, 31);
        assert_eq!(f.rgb[3 * c + 1], 0.0);
    }

    fn project_one(model: &GaussianModel, i: usize, k: &CameraIntrinsics) -> super::super::Splat2D {
        let mut s = super::super::project_gaussian(
            &RigidTransform::identity(),
            k,
            &model.positions[i],
            &model.covariance_of(i).unwrap(),
        )
        .unwrap();
        s.opacity = model.opacities[i];
        s
    }

    fn splat_alpha(s: &super::super::Splat2D, u: usize, v: usize) -> (f64, bool) {
        let d = Vector2::new(u as f64, v as f64) - s.mean;
        let q = (d.transpose() * s.cov.try_inverse().unwrap() * d)[0];
        let floor = (-4.5f64).exp();
        let inside = q < 9.0;
        (s.opacity * ((-0.5 * q).exp() - floor) / (1.0 - floor), inside)
    }

    #[test]
    fn cutoff_floor_constant() {
        assert_eq!(CUTOFF_FLOOR, (-0.5 * CUTOFF_Q).exp());
        assert!((falloff(0.0).0 - 1.0).abs() < 1e-15);
        assert_eq!(falloff(CUTOFF_Q).0, 0.0);
        assert!(falloff(CUTOFF_Q - 1e-9).0.abs() < 1e-10);
    }

    #[test]
    fn rendering_is_bitwise_deterministic() {
        let model = crate::scene::synth::synth_scene(&crate::scene::synth::SynthSpec {
            shape: crate::scene::synth::Shape::Cube { side: 0.1 },
            count: 400,
            seed: 1,
            textureless: false,
        })
        .unwrap();
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.5));
        let k = camera();
        let a = rasterize(&model, &t, &k, RenderMode::All).unwrap();
        let b = rasterize(&model, &t, &k, RenderMode::All).unwrap();
        assert_eq!(a, b);
    }
}
