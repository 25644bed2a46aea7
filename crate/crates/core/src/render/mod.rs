//! CPU Gaussian splat renderer, refinement loss and analytic pose gradients.
//!
//! Pixel `(u, v)` is sampled at image coordinates `(u, v)`, so the principal
//! point `(cx, cy)` is the pixel the optical axis passes through.

mod gradient;
mod loss;
mod raster;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RigidTransform;

pub use gradient::{
    evaluate, pose_gradient, pose_gradient_fd, pose_gradient_fd_step, Evaluation, GradientRequest, Side, FD_STEP,
};
pub use loss::{loss, ssim, LossOutput, LossWeights, SSIM_SIGMA, SSIM_WINDOW};
pub use raster::{rasterize, RenderMode, ALPHA_MASK_THRESHOLD, SPLAT_EXTENT_SIGMAS, TRANSMITTANCE_EPS};

/// Points closer than this to the camera plane are culled.
pub const Z_NEAR: f64 = 0.01;

/// Pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image must be at least 1x1".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("principal point must be finite".into()));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Jacobian of [`CameraIntrinsics::project`] at `p`.
    #[inline]
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Camera-frame point at pixel `(u, v)` with depth `d`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same camera at a different resolution, scaling focal lengths and
    /// principal point.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width: ((self.width as f64) * factor).round().max(1.0) as usize,
            height: ((self.height as f64) * factor).round().max(1.0) as usize,
        }
    }
}

/// RGB-D observation or rendering. Images are row-major; `rgb` is
/// interleaved. Depth is in meters with 0 meaning invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    /// Accumulated opacity, present on rendered frames.
    pub alpha: Option<Vec<f64>>,
}

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            depth: vec![0.0; width * height],
            mask: None,
            alpha: None,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Whether pixel `i` is inside the mask (every pixel when there is none).
    #[inline]
    pub fn in_mask(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    pub fn rgb_at(&self, i: usize) -> [f64; 3] {
        [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]
    }

    pub fn check_size(&self, k: &CameraIntrinsics) -> Result<()> {
        if (self.width, self.height) != (k.width, k.height) {
            return Err(Error::SizeMismatch {
                expected: (k.width, k.height),
                actual: (self.width, self.height),
            });
        }
        Ok(())
    }

    /// Multiplies colors by `factor`, clamping to [0, 1].
    pub fn rebrighten(&mut self, factor: f64) {
        for c in &mut self.rgb {
            *c = (*c * factor).clamp(0.0, 1.0);
        }
    }

    /// Number of pixels inside the mask.
    pub fn mask_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|b| **b).count(),
            None => self.pixel_count(),
        }
    }
}

/// Gaussian projected onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Mean in pixels.
    pub mean: Vector2<f64>,
    /// Covariance in pixels squared.
    pub cov: Matrix2<f64>,
    /// Camera-frame depth in meters.
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Perspective Jacobian used for the linearized covariance.
    pub jacobian: Matrix2x3<f64>,
}

/// Projects an object-frame Gaussian: `mean = pi(T mu)`,
/// `cov = J R Sigma R^T J^T`. Returns `None` when the center is behind
/// [`Z_NEAR`]. Color is left black and opacity at 1.
pub fn project_gaussian(
    t: &RigidTransform,
    k: &CameraIntrinsics,
    mu_m: &Vector3<f64>,
    sigma_m: &Matrix3<f64>,
) -> Option<Splat2D> {
    let p_c = t.transform_point(mu_m);
    if !(p_c.z > Z_NEAR) {
        return None;
    }
    let j = k.projection_jacobian(&p_c);
    let w = t.rotation * sigma_m * t.rotation.transpose();
    let cov = j * w * j.transpose();
    Some(Splat2D {
        mean: k.project(&p_c),
        cov: (cov + cov.transpose()) * 0.5,
        depth: p_c.z,
        color: [0.0; 3],
        opacity: 1.0,
        jacobian: j,
    })
}
