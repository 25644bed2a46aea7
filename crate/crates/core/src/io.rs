//! File formats: PNG frames, pose JSON and flat `key = value` configs.
//!
//! RGB and NOCS images are 8-bit PNGs, depth is a 16-bit PNG in
//! millimeters (0 = invalid) and masks are 8-bit PNGs with values {0, 255}.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{CameraIntrinsics, Frame};
use crate::{Aabb, RigidTransform};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn quantize8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(frame: &Frame, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(frame.width as u32, frame.height as u32, |u, v| {
        let c = frame.rgb_at(frame.index(u as usize, v as usize));
        Rgb(c.map(quantize8))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_depth(frame: &Frame, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(frame.width as u32, frame.height as u32, |u, v| {
            let d = frame.depth[frame.index(u as usize, v as usize)];
            Luma([(d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16])
        });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_mask(frame: &Frame, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(frame.width as u32, frame.height as u32, |u, v| {
        Luma([if frame.in_mask(frame.index(u as usize, v as usize)) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

/// Reads an 8-bit RGB PNG into `[0, 1]` colors.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect()))
}

pub fn load_depth(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|d| d as f64 / 1000.0).collect()))
}

pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b >= 128).collect()))
}

fn same_size(path: &Path, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(image_err(
            path,
            format!("size {}x{} does not match {}x{}", got.0, got.1, expected.0, expected.1),
        ));
    }
    Ok(())
}

/// Assembles an observation from its image files. The depth and mask are
/// optional; without a mask every pixel with depth counts.
pub fn load_frame(rgb: &Path, depth: Option<&Path>, mask: Option<&Path>) -> Result<Frame> {
    let (w, h, colors) = load_rgb(rgb)?;
    let mut frame = Frame::blank(w, h);
    frame.rgb = colors;
    if let Some(p) = depth {
        let (dw, dh, d) = load_depth(p)?;
        same_size(p, (w, h), (dw, dh))?;
        frame.depth = d;
    }
    if let Some(p) = mask {
        let (mw, mh, m) = load_mask(p)?;
        same_size(p, (w, h), (mw, mh))?;
        frame.mask = Some(m);
    }
    Ok(frame)
}

/// Writes `<stem>_rgb.png`, `<stem>_depth.png` and `<stem>_mask.png`.
pub fn save_frame(frame: &Frame, dir: &Path, stem: &str) -> Result<()> {
    save_rgb(frame, &dir.join(format!("{stem}_rgb.png")))?;
    save_depth(frame, &dir.join(format!("{stem}_depth.png")))?;
    save_mask(frame, &dir.join(format!("{stem}_mask.png")))
}

/// Serde adapter writing a pose as its row-major 4x4 matrix.
pub mod pose_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn to_rows(t: &RigidTransform) -> [[f64; 4]; 4] {
        let m = t.to_homogeneous();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<RigidTransform> {
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        RigidTransform::from_homogeneous(&m)
    }

    pub fn serialize<S: Serializer>(t: &RigidTransform, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<RigidTransform, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// A single pose file: `{"T_m_c": [[..4], ..], "aabb": {..}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(rename = "T_m_c", with = "pose_serde")]
    pub t_m_c: RigidTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<Aabb>,
}

/// One view of a synthetic scene set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: String,
    /// Seed the view was sampled from; drives its perturbation.
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "T_m_c", with = "pose_serde")]
    pub t_m_c: RigidTransform,
}

/// Camera, NOCS box and ground-truth poses of a synthetic frame set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewSet {
    pub intrinsics: CameraIntrinsics,
    pub aabb: Aabb,
    pub views: Vec<ViewRecord>,
}

/// Blends `render` over `obs` with weight `alpha` and optionally paints a
/// `border`-pixel red frame.
pub fn overlay(obs: &Frame, render: &Frame, alpha: f64, border: usize) -> Result<RgbImage> {
    if (obs.width, obs.height) != (render.width, render.height) {
        return Err(Error::SizeMismatch {
            expected: (obs.width, obs.height),
            actual: (render.width, render.height),
        });
    }
    let (w, h) = (obs.width, obs.height);
    Ok(RgbImage::from_fn(w as u32, h as u32, |u, v| {
        let (u, v) = (u as usize, v as usize);
        if u < border || v < border || u + border >= w || v + border >= h {
            return Rgb([255, 0, 0]);
        }
        let i = obs.index(u, v);
        let (a, b) = (obs.rgb_at(i), render.rgb_at(i));
        Rgb(std::array::from_fn(|c| quantize8((1.0 - alpha) * a[c] + alpha * b[c])))
    }))
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_pose(t: &RigidTransform, aabb: Option<&Aabb>, path: &Path) -> Result<()> {
    write_json(&PoseFile { t_m_c: *t, aabb: aabb.copied() }, path)
}

pub fn load_pose(path: &Path) -> Result<RigidTransform> {
    Ok(read_json::<PoseFile>(path)?.t_m_c)
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}
