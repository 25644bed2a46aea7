//! Masked photometric, structural and depth loss with per-pixel gradients.

use serde::{Deserialize, Serialize};

use super::{Frame, ALPHA_MASK_THRESHOLD};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Width of the opacity band over which depth residuals fade in, above
/// [`ALPHA_MASK_THRESHOLD`].
const DEPTH_RAMP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Split between the L1 and structural color terms.
    pub lambda: f64,
    /// Depth term weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            beta: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub image: f64,
    pub dssim: f64,
    pub depth: f64,
    /// d total / d predicted rgb, interleaved like [`Frame::rgb`].
    pub grad_rgb: Vec<f64>,
    pub grad_depth: Vec<f64>,
    /// d total / d predicted accumulated opacity (zero without one).
    pub grad_alpha: Vec<f64>,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded separable blur, output the same size as the input. The kernel
/// is symmetric so this operator is its own adjoint.
fn blur(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    let ru = r as usize;
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let out = &mut tmp[y * w..(y + 1) * w];
        for x in 0..w {
            if x >= ru && x + ru < w {
                let win = &row[x - ru..=x + ru];
                out[x] = win.iter().zip(k).map(|(a, b)| a * b).sum();
                continue;
            }
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * row[xx as usize];
                }
            }
            out[x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let yy = y as isize + t as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += kv * src[x];
            }
        }
    }
    out
}

struct SsimChannel {
    map: Vec<f64>,
    /// Partials of each pixel's SSIM with respect to the local mean of the
    /// second image, its local second moment and the local cross moment.
    d_mu: Vec<f64>,
    d_yy: Vec<f64>,
    d_xy: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW], grads: bool) -> SsimChannel {
    let n = w * h;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur(x, w, h, k);
    let mu_y = blur(y, w, h, k);
    let m_xx = blur(&xx, w, h, k);
    let m_yy = blur(&yy, w, h, k);
    let m_xy = blur(&xy, w, h, k);
    let mut out = SsimChannel {
        map: vec![0.0; n],
        d_mu: if grads { vec![0.0; n] } else { Vec::new() },
        d_yy: if grads { vec![0.0; n] } else { Vec::new() },
        d_xy: if grads { vec![0.0; n] } else { Vec::new() },
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (m_xy[i] - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (m_xx[i] - mx * mx) + (m_yy[i] - my * my) + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        out.map[i] = s;
        if grads {
            out.d_mu[i] = 2.0 * mx * (a2 - a1) / (b1 * b2) - 2.0 * my * s * (1.0 / b1 - 1.0 / b2);
            out.d_yy[i] = -s / b2;
            out.d_xy[i] = 2.0 * a1 / (b1 * b2);
        }
    }
    out
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Crop {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Crop {
    /// Bounding box of `f`'s mask grown by the SSIM window radius. SSIM at a
    /// masked pixel and its gradient only involve pixels inside it.
    fn around_mask(f: &Frame) -> Option<Self> {
        let Some(mask) = &f.mask else {
            return Some(Self {
                x0: 0,
                y0: 0,
                w: f.width,
                h: f.height,
            });
        };
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (x, y) = (i % f.width, i / f.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if x0 == usize::MAX {
            return None;
        }
        let r = SSIM_WINDOW / 2;
        let (x0, y0) = (x0.saturating_sub(r), y0.saturating_sub(r));
        let (x1, y1) = ((x1 + r + 1).min(f.width), (y1 + r + 1).min(f.height));
        Some(Self {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    #[inline]
    fn full_index(&self, i: usize, width: usize) -> usize {
        (self.y0 + i / self.w) * width + self.x0 + i % self.w
    }
}

fn channel(f: &Frame, c: usize, crop: &Crop) -> Vec<f64> {
    (0..crop.w * crop.h)
        .map(|i| f.rgb[3 * crop.full_index(i, f.width) + c])
        .collect()
}

fn check_same_size(a: &Frame, b: &Frame) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::SizeMismatch {
            expected: (a.width, a.height),
            actual: (b.width, b.height),
        });
    }
    Ok(())
}

/// Mean SSIM over the color channels and the pixels of `a`'s mask.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same_size(a, b)?;
    let n = a.mask_count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let k = gaussian_kernel();
    let crop = Crop::around_mask(a).ok_or(Error::EmptyMask)?;
    let mut total = 0.0;
    for c in 0..3 {
        let ch = ssim_channel(&channel(a, c, &crop), &channel(b, c, &crop), crop.w, crop.h, &k, false);
        total += (0..crop.w * crop.h)
            .filter(|i| a.in_mask(crop.full_index(*i, a.width)))
            .map(|i| ch.map[i])
            .sum::<f64>();
    }
    Ok(total / (3 * n) as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Refinement loss of `pred` against `obs`, averaged over the observation
/// mask. Depth residuals count where both depths are valid, faded in by the
/// predicted opacity when `pred` carries one.
pub fn loss(obs: &Frame, pred: &Frame, weights: &LossWeights) -> Result<LossOutput> {
    check_same_size(obs, pred)?;
    let w = obs.width;
    let np = obs.pixel_count();
    let n = obs.mask_count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let lambda = weights.lambda;
    let mut grad_rgb = vec![0.0; np * 3];
    let mut grad_depth = vec![0.0; np];
    let mut grad_alpha = vec![0.0; np];

    let mut l1 = 0.0;
    for i in 0..np {
        if !obs.in_mask(i) {
            continue;
        }
        for c in 0..3 {
            let d = pred.rgb[3 * i + c] - obs.rgb[3 * i + c];
            l1 += d.abs();
            grad_rgb[3 * i + c] = lambda * sign(d) * inv_n / 3.0;
        }
    }
    let image = l1 * inv_n / 3.0;

    let mut dssim = 0.0;
    if lambda != 1.0 {
        let k = gaussian_kernel();
        let crop = Crop::around_mask(obs).ok_or(Error::EmptyMask)?;
        let (cw, ch_) = (crop.w, crop.h);
        let nc = cw * ch_;
        let mut s_sum = 0.0;
        // d total / d SSIM at a masked pixel
        let g_s = -(1.0 - lambda) * 0.5 * inv_n / 3.0;
        for c in 0..3 {
            let x = channel(obs, c, &crop);
            let y = channel(pred, c, &crop);
            let ch = ssim_channel(&x, &y, cw, ch_, &k, true);
            let mut p = vec![0.0; nc];
            let mut q = vec![0.0; nc];
            let mut r = vec![0.0; nc];
            for i in 0..nc {
                if obs.in_mask(crop.full_index(i, w)) {
                    s_sum += ch.map[i];
                    p[i] = g_s * ch.d_mu[i];
                    q[i] = g_s * ch.d_yy[i];
                    r[i] = g_s * ch.d_xy[i];
                }
            }
            let (p, q, r) = (blur(&p, cw, ch_, &k), blur(&q, cw, ch_, &k), blur(&r, cw, ch_, &k));
            for i in 0..nc {
                let fi = crop.full_index(i, w);
                grad_rgb[3 * fi + c] += p[i] + 2.0 * y[i] * q[i] + x[i] * r[i];
            }
        }
        dssim = (1.0 - s_sum * inv_n / 3.0) * 0.5;
    }

    let mut depth = 0.0;
    if weights.beta != 0.0 {
        for i in 0..np {
            if !(obs.in_mask(i) && obs.depth[i] > 0.0 && pred.depth[i] > 0.0) {
                continue;
            }
            let d = pred.depth[i] - obs.depth[i];
            let (ramp, d_ramp) = match &pred.alpha {
                Some(a) => {
                    let r = (a[i] - ALPHA_MASK_THRESHOLD) / DEPTH_RAMP;
                    if r >= 1.0 {
                        (1.0, 0.0)
                    } else if r <= 0.0 {
                        (0.0, 0.0)
                    } else {
                        (r, 1.0 / DEPTH_RAMP)
                    }
                }
                None => (1.0, 0.0),
            };
            depth += ramp * d.abs();
            grad_depth[i] = weights.beta * ramp * sign(d) * inv_n;
            grad_alpha[i] = weights.beta * d_ramp * d.abs() * inv_n;
        }
        depth *= inv_n;
    }

    Ok(LossOutput {
        total: lambda * image + (1.0 - lambda) * dssim + weights.beta * depth,
        image,
        dssim,
        depth,
        grad_rgb,
        grad_depth,
        grad_alpha,
    })
}
