//! Binary little-endian PLY in the layout written by 3D Gaussian splatting
//! trainers: `x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2
//! rot_0..3`. Opacity is stored as a logit and scales as logarithms.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use super::sh::SH_COEFFS;
use super::GaussianModel;
use crate::error::{Error, Result};

const REST_PER_CHANNEL: usize = SH_COEFFS - 1;

/// Opacities are clamped away from 0 and 1 before taking the logit.
const OPACITY_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Header {
    vertex_count: usize,
    properties: Vec<(String, ScalarType)>,
}

fn parse_header(reader: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let next_line = |reader: &mut dyn BufRead, line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::Ply(format!("reading header: {e}")))?;
        Ok(n > 0)
    };

    if !next_line(reader, &mut line)? || line.trim() != "ply" {
        return Err(Error::Ply("missing `ply` magic".into()));
    }
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut seen_format = false;
    loop {
        if !next_line(reader, &mut line)? {
            return Err(Error::Ply("header is not terminated by end_header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Ply(format!("unsupported format `{fmt}`")));
                }
                seen_format = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if vertex_count.is_some() {
                    return Err(Error::Ply(format!(
                        "element `{name}` after the vertex element is not supported"
                    )));
                }
                if *name != "vertex" {
                    return Err(Error::Ply(format!("unexpected element `{name}` before vertex")));
                }
                vertex_count = Some(
                    count
                        .parse::<usize>()
                        .map_err(|_| Error::Ply(format!("bad vertex count `{count}`")))?,
                );
                in_vertex = true;
            }
            ["property", "list", ..] => {
                return Err(Error::Ply("list properties are not supported".into()));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(Error::Ply("property outside an element".into()));
                }
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::Ply(format!("unknown property type `{ty}`")))?;
                properties.push((name.to_string(), ty));
            }
            [] => {}
            _ => return Err(Error::Ply(format!("malformed header line `{}`", line.trim()))),
        }
    }
    if !seen_format {
        return Err(Error::Ply("missing format line".into()));
    }
    let vertex_count = vertex_count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (a / (1.0 - a)).ln()
}

/// Reads a Gaussian model, applying sigmoid to opacities, exp to scales and
/// normalizing quaternions. Missing `f_rest_*` properties mean degree 0.
pub fn read_ply(reader: impl Read) -> Result<GaussianModel<f64>> {
    let mut reader = BufReader::new(reader);
    let header = parse_header(&mut reader)?;
    if header.vertex_count == 0 {
        return Err(Error::Ply("file contains no vertices".into()));
    }

    let mut offsets = HashMap::new();
    let mut stride = 0;
    for (name, ty) in &header.properties {
        offsets.insert(name.as_str(), (stride, *ty));
        stride += ty.size();
    }
    let lookup = |name: &str| -> Result<(usize, ScalarType)> {
        offsets
            .get(name)
            .copied()
            .ok_or_else(|| Error::Ply(format!("missing property `{name}`")))
    };
    let required = |names: &[&str]| -> Result<Vec<(usize, ScalarType)>> {
        names.iter().map(|n| lookup(n)).collect()
    };
    let pos = required(&["x", "y", "z"])?;
    let dc = required(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity = lookup("opacity")?;
    let scale = required(&["scale_0", "scale_1", "scale_2"])?;
    let rot = required(&["rot_0", "rot_1", "rot_2", "rot_3"])?;
    let rest: Vec<Option<(usize, ScalarType)>> = (0..3 * REST_PER_CHANNEL)
        .map(|i| offsets.get(format!("f_rest_{i}").as_str()).copied())
        .collect();

    let n = header.vertex_count;
    let mut model = GaussianModel {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        sh: Vec::with_capacity(n),
    };
    let mut buf = vec![0u8; stride];
    for i in 0..n {
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::Ply(format!("vertex {i}: {e}")))?;
        let get = |(off, ty): (usize, ScalarType)| ty.read(&buf[off..]);
        model
            .positions
            .push(Vector3::new(get(pos[0]), get(pos[1]), get(pos[2])));
        let q = Quaternion::new(get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3]));
        let norm = q.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Ply(format!("vertex {i}: degenerate rotation")));
        }
        model.rotations.push(q / norm);
        model.scales.push(Vector3::new(
            get(scale[0]).exp(),
            get(scale[1]).exp(),
            get(scale[2]).exp(),
        ));
        model.opacities.push(sigmoid(get(opacity)));
        let mut coeffs = [[0.0; SH_COEFFS]; 3];
        for ch in 0..3 {
            coeffs[ch][0] = get(dc[ch]);
            for j in 0..REST_PER_CHANNEL {
                if let Some(p) = rest[ch * REST_PER_CHANNEL + j] {
                    coeffs[ch][1 + j] = get(p);
                }
            }
        }
        model.sh.push(coeffs);
    }
    Ok(model)
}

pub fn write_ply(model: &GaussianModel<f64>, writer: impl Write) -> Result<()> {
    model.validate()?;
    let mut w = BufWriter::new(writer);
    let io = |e: std::io::Error| Error::Ply(format!("write: {e}"));
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", model.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    for i in 0..model.len() {
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend(model.positions[i].iter());
        row.extend([0.0; 3]);
        let c = &model.sh[i];
        row.extend((0..3).map(|ch| c[ch][0]));
        for ch in 0..3 {
            row.extend(&c[ch][1..]);
        }
        row.push(logit(model.opacities[i]));
        row.extend(model.scales[i].iter().map(|s| s.ln()));
        let q = &model.rotations[i];
        row.extend([q.w, q.i, q.j, q.k]);
        for v in row {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianModel<f64>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(f)
}

pub fn save_ply(model: &GaussianModel<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(model, f)
}

/// Writes points as an ASCII PLY, for inspection in external viewers.
pub fn write_points_ascii(points: &[Vector3<f64>], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let io = |e: std::io::Error| Error::Ply(format!("write: {e}"));
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )
    .map_err(io)?;
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(io)?;
    }
    w.flush().map_err(io)
}
