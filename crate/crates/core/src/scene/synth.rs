//! Deterministic synthetic Gaussian objects for tests and experiments.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sh::{dc_from_color, SH_COEFFS};
use super::GaussianModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Surface of an axis-aligned cube centered at the origin.
    Cube { side: f64 },
    /// Sphere surface centered at the origin.
    Sphere { radius: f64 },
    /// Lumpy, stretched sphere with no rotational symmetry.
    Blob { radius: f64 },
}

impl Shape {
    /// Parses `cube`, `sphere` or `blob` with the given characteristic size
    /// (side length for cubes, radius otherwise).
    pub fn parse(name: &str, size: f64) -> Result<Self> {
        match name {
            "cube" => Ok(Shape::Cube { side: size }),
            "sphere" => Ok(Shape::Sphere { radius: size }),
            "blob" => Ok(Shape::Blob { radius: size }),
            other => Err(Error::UnknownShape(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Cube { .. } => "cube",
            Shape::Sphere { .. } => "sphere",
            Shape::Blob { .. } => "blob",
        }
    }

    pub fn size(&self) -> f64 {
        match *self {
            Shape::Cube { side } => side,
            Shape::Sphere { radius } | Shape::Blob { radius } => radius,
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    /// `name` or `name:size`; the default size is 0.1 m.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((name, size)) => {
                let size = size
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad shape size in `{s}`")))?;
                Shape::parse(name, size)
            }
            None => Shape::parse(s, 0.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shape: Shape,
    pub count: usize,
    pub seed: u64,
    /// All Gaussians share one DC color and no higher bands.
    pub textureless: bool,
}

/// Color used for textureless models.
pub const UNIFORM_COLOR: [f64; 3] = [0.62, 0.58, 0.52];

/// Surface sample: position, unit normal, local sample spacing.
struct Sample {
    position: Vector3<f64>,
    normal: Vector3<f64>,
    spacing: f64,
}

pub fn synth_scene(spec: &SynthSpec) -> Result<GaussianModel<f64>> {
    if spec.count == 0 {
        return Err(Error::InvalidModel("count must be at least 1".into()));
    }
    if !(spec.shape.size() > 0.0) {
        return Err(Error::InvalidModel("shape size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = match spec.shape {
        Shape::Cube { side } => cube_samples(side, spec.count, &mut rng),
        Shape::Sphere { radius } => sphere_samples(spec.count, &mut rng, |d| d * radius, radius),
        Shape::Blob { radius } => sphere_samples(spec.count, &mut rng, |d| blob_point(d, radius), radius),
    };

    let texture = Texture::new(&mut rng, spec.shape.size());
    let n = samples.len();
    let mut model = GaussianModel {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        sh: Vec::with_capacity(n),
    };
    for s in samples {
        // wide enough that the surface is opaque between jittered centers
        let tangent = 0.72 * s.spacing;
        model.positions.push(s.position);
        model.rotations.push(frame_quaternion(&s.normal));
        model
            .scales
            .push(Vector3::new(tangent, tangent, 0.15 * tangent));
        model.opacities.push(rng.random_range(0.9..0.99));
        let mut coeffs = [[0.0; SH_COEFFS]; 3];
        if spec.textureless {
            for ch in 0..3 {
                coeffs[ch][0] = dc_from_color(UNIFORM_COLOR[ch]);
            }
        } else {
            let color = texture.color(&s.position);
            for ch in 0..3 {
                coeffs[ch][0] = dc_from_color(color[ch]);
                for c in coeffs[ch].iter_mut().skip(1) {
                    *c = rng.random_range(-0.02..0.02);
                }
            }
        }
        model.sh.push(coeffs);
    }
    model.validate()?;
    Ok(model)
}

/// Unstructured cloud of `count` anisotropic Gaussians inside a cube of
/// half-width `half_extent`, with random opacities and degree-3 colors.
/// Overlaps are sparse, which keeps the rendered image smooth in the pose.
pub fn random_cloud(count: usize, half_extent: f64, seed: u64) -> Result<GaussianModel<f64>> {
    if count == 0 {
        return Err(Error::InvalidModel("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GaussianModel {
        positions: Vec::with_capacity(count),
        rotations: Vec::with_capacity(count),
        scales: Vec::with_capacity(count),
        opacities: Vec::with_capacity(count),
        sh: Vec::with_capacity(count),
    };
    let scale = half_extent * 0.1;
    for _ in 0..count {
        model
            .positions
            .push(Vector3::from_fn(|_, _| rng.random_range(-half_extent..half_extent)));
        let axis = Vector3::from_fn(|_, _| rng.random_range(-PI..PI));
        model.rotations.push(UnitQuaternion::from_scaled_axis(axis).into_inner());
        model
            .scales
            .push(Vector3::from_fn(|_, _| rng.random_range(0.4 * scale..1.6 * scale)));
        model.opacities.push(rng.random_range(0.2..0.9));
        let mut coeffs = [[0.0; SH_COEFFS]; 3];
        for ch in coeffs.iter_mut() {
            ch[0] = rng.random_range(-1.0..1.0);
            for c in ch.iter_mut().skip(1) {
                *c = rng.random_range(-0.1..0.1);
            }
        }
        model.sh.push(coeffs);
    }
    model.validate()?;
    Ok(model)
}

/// Rotation whose local z axis is `normal`.
fn frame_quaternion(normal: &Vector3<f64>) -> Quaternion<f64> {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = helper.cross(&n).normalize();
    let v = n.cross(&u);
    let m = Matrix3::from_columns(&[u, v, n]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)).into_inner()
}

fn cube_samples(side: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let half = side / 2.0;
    let mut out = Vec::with_capacity(count);
    for face in 0..6 {
        let n_face = count / 6 + usize::from(face < count % 6);
        if n_face == 0 {
            continue;
        }
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let g = (n_face as f64).sqrt().ceil() as usize;
        let cell = side / g as f64;
        let cells = g * g;
        for k in 0..n_face {
            let idx = k * cells / n_face;
            let (i, j) = (idx / g, idx % g);
            let ju: f64 = rng.random_range(-0.25..0.25);
            let jv: f64 = rng.random_range(-0.25..0.25);
            let mut p = Vector3::zeros();
            p[axis] = sign * half;
            p[a1] = -half + (i as f64 + 0.5 + ju) * cell;
            p[a2] = -half + (j as f64 + 0.5 + jv) * cell;
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            out.push(Sample {
                position: p,
                normal,
                spacing: (side * side / n_face as f64).sqrt(),
            });
        }
    }
    out
}

/// Fibonacci lattice on the unit sphere, jittered, mapped through `surface`.
fn sphere_samples(
    count: usize,
    rng: &mut ChaCha8Rng,
    surface: impl Fn(&Vector3<f64>) -> Vector3<f64>,
    radius: f64,
) -> Vec<Sample> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let offset: f64 = rng.random_range(0.0..2.0 * PI);
    let spacing_unit = (4.0 * PI / count as f64).sqrt();
    (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let theta = golden * i as f64 + offset;
            let mut d = Vector3::new(r * theta.cos(), y, r * theta.sin());
            d += Vector3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ) * spacing_unit;
            let d = d.normalize();
            let position = surface(&d);
            // normal from the parametric surface
            let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let t1 = helper.cross(&d).normalize();
            let t2 = d.cross(&t1);
            let h = 1e-5;
            let du = surface(&(d + t1 * h).normalize()) - surface(&(d - t1 * h).normalize());
            let dv = surface(&(d + t2 * h).normalize()) - surface(&(d - t2 * h).normalize());
            let mut normal = du.cross(&dv).normalize();
            if normal.dot(&d) < 0.0 {
                normal = -normal;
            }
            Sample {
                position,
                normal,
                spacing: spacing_unit * radius,
            }
        })
        .collect()
}

fn blob_point(d: &Vector3<f64>, radius: f64) -> Vector3<f64> {
    let bump = 1.0
        + 0.18 * (3.0 * d.x + 1.0).sin() * (2.0 * d.y + 0.5).cos()
        + 0.12 * (4.0 * d.z + 0.3 * d.x).sin()
        + 0.1 * d.x.max(0.0) * d.y;
    Vector3::new(1.3 * d.x, 1.0 * d.y, 0.8 * d.z) * (radius * bump)
}

/// Smooth procedural color field over object coordinates.
struct Texture {
    dirs: [[Vector3<f64>; 2]; 3],
    phases: [f64; 3],
    k1: f64,
    k2: f64,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let mut dir = || {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize()
        };
        let dirs = [[dir(), dir()], [dir(), dir()], [dir(), dir()]];
        let phases = [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ];
        Self {
            dirs,
            phases,
            k1: 2.0 * PI / (0.8 * size),
            k2: 2.0 * PI / (0.35 * size),
        }
    }

    fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let [a, b] = &self.dirs[ch];
            let v = 0.5
                + 0.28 * (self.k1 * p.dot(a) + self.phases[ch]).sin()
                + 0.12 * (self.k2 * p.dot(b)).sin();
            c[ch] = v.clamp(0.05, 0.95);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, textureless: bool) -> SynthSpec {
        SynthSpec {
            shape,
            count: 500,
            seed: 42,
            textureless,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        for shape in [
            Shape::Cube { side: 0.1 },
            Shape::Sphere { radius: 0.1 },
            Shape::Blob { radius: 0.05 },
        ] {
            let a = synth_scene(&spec(shape, false)).unwrap();
            let b = synth_scene(&spec(shape, false)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 500);
        }
    }

    #[test]
    fn sphere_centers_on_radius() {
        let m = synth_scene(&spec(Shape::Sphere { radius: 0.1 }, false)).unwrap();
        for p in &m.positions {
            assert!((p.norm() - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn cube_centers_on_faces() {
        let m = synth_scene(&SynthSpec {
            count: 2003,
            ..spec(Shape::Cube { side: 0.1 }, false)
        })
        .unwrap();
        assert_eq!(m.len(), 2003);
        for p in &m.positions {
            assert!((p.amax() - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn textureless_has_zero_color_variance() {
        let m = synth_scene(&spec(Shape::Cube { side: 0.1 }, true)).unwrap();
        let first = m.sh[0];
        assert!(m.sh.iter().all(|c| *c == first));
        assert!(first.iter().all(|row| row[1..].iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn normals_align_with_local_z() {
        let m = synth_scene(&spec(Shape::Blob { radius: 0.05 }, false)).unwrap();
        for (q, p) in m.rotations.iter().zip(&m.positions) {
            let z = UnitQuaternion::new_unchecked(*q) * Vector3::z();
            // outward normals of a star-shaped blob point away from the origin
            assert!(z.dot(&p.normalize()) > 0.0);
        }
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("cube".parse::<Shape>().unwrap(), Shape::Cube { side: 0.1 });
        assert_eq!("sphere:0.2".parse::<Shape>().unwrap(), Shape::Sphere { radius: 0.2 });
        assert!(matches!("torus".parse::<Shape>(), Err(Error::UnknownShape(_))));
        assert!(synth_scene(&SynthSpec { count: 0, ..spec(Shape::Cube { side: 0.1 }, false) }).is_err());
    }
}
