//! Analytic and finite-difference gradients of the loss with respect to a
//! pose perturbation and the SH coefficients.

use nalgebra::{Matrix2, Matrix3, Vector3, Vector6};

use super::raster::{ColorSource, Raster, RenderMode, Upstream};
use super::{loss, CameraIntrinsics, Frame, LossOutput, LossWeights, ALPHA_MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::lie::{hat3, jac_point_left, jac_point_right, jac_rot_left, jac_rot_right};
use crate::scene::sh::{basis, basis_gradient, ShCoeffs, SH_COEFFS};
use crate::{GaussianModel, RigidTransform, Twist};

/// Central-difference step on each twist coordinate.
pub const FD_STEP: f64 = 1e-4;

/// Which side the twist perturbs the pose from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `exp(tau) * T`: moves the camera.
    Left,
    /// `T * exp(tau)`: moves the object in its own frame.
    Right,
}

impl Side {
    pub fn perturb(self, t: &RigidTransform, tau: &Twist) -> RigidTransform {
        match self {
            Side::Left => t.perturb_left(tau),
            Side::Right => t.perturb_right(tau),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradientRequest {
    pub pose: Option<Side>,
    pub sh: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossOutput,
    pub render: Frame,
    pub pose_grad: Option<Vector6<f64>>,
    /// Indexed like the model's Gaussians; zero for culled ones.
    pub sh_grad: Option<Vec<ShCoeffs<f64>>>,
}

/// Renders, scores against `obs` and backpropagates whatever `request`
/// asks for.
pub fn evaluate(
    model: &GaussianModel,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    obs: &Frame,
    weights: &LossWeights,
    request: GradientRequest,
) -> Result<Evaluation> {
    obs.check_size(k)?;
    k.validate()?;
    let raster = Raster::build(model, t, k, ColorSource::Sh)?;
    if raster.visible_count() == 0 {
        return Err(Error::DegenerateRender);
    }
    let acc = raster.forward();
    let render = raster.to_frame(&acc, RenderMode::All);
    let lo = loss(obs, &render, weights)?;
    if request.pose.is_none() && !request.sh {
        return Ok(Evaluation {
            loss: lo,
            render,
            pose_grad: None,
            sh_grad: None,
        });
    }

    let np = k.pixel_count();
    let mut up = Upstream {
        color: lo.grad_rgb.clone(),
        depth_sum: vec![0.0; np],
        alpha: lo.grad_alpha.clone(),
    };
    for i in 0..np {
        for c in 0..3 {
            let v = acc.color[3 * i + c];
            if !(0.0..=1.0).contains(&v) {
                up.color[3 * i + c] = 0.0;
            }
        }
        let a = acc.alpha[i];
        if a >= ALPHA_MASK_THRESHOLD {
            let g = lo.grad_depth[i];
            up.depth_sum[i] = g / a;
            up.alpha[i] -= g * render.depth[i] / a;
        }
    }
    let grads = raster.backward(&up);

    let mut pose_grad = request.pose.map(|_| Vector6::zeros());
    let mut sh_grad = request.sh.then(|| vec![[[0.0; SH_COEFFS]; 3]; model.len()]);
    let cam_center = -(t.rotation.transpose() * t.translation);
    let rot_jac = request.pose.map(|side| match side {
        Side::Left => jac_rot_left(&t.rotation),
        Side::Right => jac_rot_right(&t.rotation),
    });

    for (s, g) in raster.splats.iter().zip(&grads) {
        // color -> raw SH value, zero where the clamp is active
        let g_raw = [0, 1, 2].map(|c| if s.color_active[c] { g.color[c] } else { 0.0 });
        let coeffs = &model.sh[s.gaussian];
        if let Some(sg) = sh_grad.as_mut() {
            let b = basis(&s.view_dir);
            for c in 0..3 {
                for j in 0..SH_COEFFS {
                    sg[s.gaussian][c][j] = g_raw[c] * b[j];
                }
            }
        }
        let (Some(side), Some(pg), Some(rj)) = (request.pose, pose_grad.as_mut(), rot_jac.as_ref()) else {
            continue;
        };

        // conic -> 2D covariance
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -(conic * g_conic * conic);
        // cov2 = J W J^T, W = R S R^T
        let g_j = 2.0 * g_cov2 * s.j * s.cov_cam;
        let g_w = s.j.transpose() * g_cov2 * s.j;
        let g_r: Matrix3<f64> = 2.0 * g_w * t.rotation * s.cov_obj;

        let p = &s.p_c;
        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let iz3 = iz2 * iz;
        let mut g_p = s.j.transpose() * nalgebra::Vector2::new(g.mean[0], g.mean[1]);
        g_p.x += g_j[(0, 2)] * (-k.fx * iz2);
        g_p.y += g_j[(1, 2)] * (-k.fy * iz2);
        g_p.z += g_j[(0, 0)] * (-k.fx * iz2)
            + g_j[(0, 2)] * (2.0 * k.fx * p.x * iz3)
            + g_j[(1, 1)] * (-k.fy * iz2)
            + g_j[(1, 2)] * (2.0 * k.fy * p.y * iz3);
        g_p.z += g.depth;

        let mu_m = &model.positions[s.gaussian];
        let jp = match side {
            Side::Left => jac_point_left(p),
            Side::Right => jac_point_right(t, mu_m),
        };
        let mut gt = jp.transpose() * g_p;
        let g_phi = rj.contract(&g_r);
        for a in 0..3 {
            gt[3 + a] += g_phi[a];
        }

        // view-dependent color through the camera center
        if g_raw.iter().any(|v| *v != 0.0) && s.view_len > 0.0 {
            let bg = basis_gradient(&s.view_dir);
            let mut g_dir = Vector3::zeros();
            for c in 0..3 {
                for j in 1..SH_COEFFS {
                    g_dir += bg[j] * (g_raw[c] * coeffs[c][j]);
                }
            }
            let d = &s.view_dir;
            let g_v = (g_dir - d * d.dot(&g_dir)) / s.view_len;
            let g_c = -g_v;
            match side {
                Side::Left => {
                    let g_rho = -(t.rotation * g_c);
                    for a in 0..3 {
                        gt[a] += g_rho[a];
                    }
                }
                Side::Right => {
                    let g_phi = hat3(&cam_center).transpose() * g_c;
                    for a in 0..3 {
                        gt[a] -= g_c[a];
                        gt[3 + a] += g_phi[a];
                    }
                }
            }
        }
        *pg += gt;
    }

    Ok(Evaluation {
        loss: lo,
        render,
        pose_grad,
        sh_grad,
    })
}

/// Analytic `d loss / d tau` at `tau = 0`.
pub fn pose_gradient(
    model: &GaussianModel,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    obs: &Frame,
    weights: &LossWeights,
    side: Side,
) -> Result<Vector6<f64>> {
    let e = evaluate(model, t, k, obs, weights, GradientRequest { pose: Some(side), sh: false })?;
    Ok(e.pose_grad.expect("pose gradient requested"))
}

/// Central differences of render plus loss over the six twist coordinates.
pub fn pose_gradient_fd(
    model: &GaussianModel,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    obs: &Frame,
    weights: &LossWeights,
    side: Side,
) -> Result<Vector6<f64>> {
    pose_gradient_fd_step(model, t, k, obs, weights, side, FD_STEP)
}

pub fn pose_gradient_fd_step(
    model: &GaussianModel,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    obs: &Frame,
    weights: &LossWeights,
    side: Side,
    step: f64,
) -> Result<Vector6<f64>> {
    let score = |tau: Vector6<f64>| -> Result<f64> {
        let tp = side.perturb(t, &Twist::from_vector(&tau));
        Ok(evaluate(model, &tp, k, obs, weights, GradientRequest::default())?.loss.total)
    };
    let mut g = Vector6::zeros();
    for a in 0..6 {
        let mut e = Vector6::zeros();
        e[a] = step;
        g[a] = (score(e)? - score(-e)?) / (2.0 * step);
    }
    Ok(g)
}
