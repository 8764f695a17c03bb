//! Readers and writers for KITTI velodyne scans, PLY files and KITTI pose lists.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Point3;

use super::{PointCloud, RigidTransform};
use crate::error::{Error, Result};

/// Reads a KITTI `.bin` scan: little-endian f32 quadruples `(x, y, z, reflectance)`.
pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_kitti_bin(&bytes)
}

pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "KITTI scan length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut refl = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        refl.push(f(3));
    }
    PointCloud::with_attributes(points, Some(refl))
}

pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let r = cloud.attributes().map_or(0.0, |a| a[i]);
        for v in [p.x, p.y, p.z, r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_kitti_bin(cloud))?;
    Ok(())
}

/// Parses a KITTI pose file, one row-major 3×4 matrix per non-empty line.
pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(parse_pose_line(&line).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(poses)
}

pub fn parse_pose_line(line: &str) -> Result<RigidTransform> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number {t:?}"))))
        .collect::<Result<_>>()?;
    let arr: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::Format(format!("expected 12 values, found {}", v.len())))?;
    RigidTransform::from_row_major_3x4(&arr)
}

pub fn format_pose_line(t: &RigidTransform) -> String {
    t.to_row_major_3x4()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex data read from a PLY file: coordinates plus every scalar property by name.
#[derive(Debug, Clone)]
pub struct PlyVertices {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn to_cloud(&self) -> Result<PointCloud> {
        let get = |n: &str| self.column(n).ok_or_else(|| Error::Format(format!("PLY vertex lacks property {n}")));
        let (x, y, z) = (get("x")?, get("y")?, get("z")?);
        let points = (0..x.len()).map(|i| Point3::new(x[i], y[i], z[i])).collect();
        PointCloud::with_attributes(points, self.column("intensity").map(<[f64]>::to_vec))
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply_vertices(path)?.to_cloud()
}

/// Reads the vertex element of an ASCII or binary little-endian PLY file.
pub fn read_ply_vertices(path: impl AsRef<Path>) -> Result<PlyVertices> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(Error::Format("missing PLY magic".into()));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_other_first = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(Error::Format(format!("unsupported PLY format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if seen_other_first {
                    return Err(Error::Format("vertex element must come first".into()));
                }
                vertex_count = Some(n.parse::<usize>().map_err(|_| Error::Format(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if vertex_count.is_none() {
                    seen_other_first = true;
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::Format(format!("unknown PLY type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(Error::Format(format!("unexpected PLY header line {l:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::Format("PLY header lacks a format line".into()))?;
    let n = vertex_count.ok_or_else(|| Error::Format("PLY header lacks a vertex element".into()))?;
    let mut columns = vec![Vec::with_capacity(n); props.len()];
    match format {
        PlyFormat::Ascii => {
            let mut buf = String::new();
            for i in 0..n {
                buf.clear();
                if reader.read_line(&mut buf)? == 0 {
                    return Err(Error::Format(format!("PLY ended after {i} of {n} vertices")));
                }
                let vals: Vec<&str> = buf.split_whitespace().collect();
                if vals.len() < props.len() {
                    return Err(Error::Format(format!("vertex {i} has {} values, expected {}", vals.len(), props.len())));
                }
                for (c, v) in vals.iter().take(props.len()).enumerate() {
                    columns[c].push(v.parse::<f64>().map_err(|_| Error::Format(format!("bad value {v:?}")))?);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut row = vec![0u8; stride];
            for i in 0..n {
                reader
                    .read_exact(&mut row)
                    .map_err(|_| Error::Format(format!("PLY ended after {i} of {n} vertices")))?;
                let mut off = 0;
                for (c, (_, s)) in props.iter().enumerate() {
                    columns[c].push(s.read_le(&row[off..]));
                    off += s.size();
                }
            }
        }
    }
    Ok(PlyVertices {
        names: props.into_iter().map(|(n, _)| n).collect(),
        columns,
    })
}

/// Writes `x y z` (float32) plus the cloud's intensity and any extra float
/// properties, e.g. a per-vertex `radius`.
pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    extra: &[(&str, &[f64])],
    format: PlyFormat,
) -> Result<()> {
    let mut props: Vec<(&str, &[f64])> = Vec::new();
    if let Some(a) = cloud.attributes() {
        props.push(("intensity", a));
    }
    for (name, values) in extra {
        if values.len() != cloud.len() {
            return Err(Error::Shape(format!(
                "property {name} has {} values for {} vertices",
                values.len(),
                cloud.len()
            )));
        }
        props.push((name, values));
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    for (name, _) in &props {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        let row = [p.x, p.y, p.z].into_iter().chain(props.iter().map(|(_, v)| v[i]));
        match format {
            PlyFormat::Ascii => {
                let s: Vec<String> = row.map(|v| format!("{}", v as f32)).collect();
                writeln!(w, "{}", s.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in row {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a cloud by extension: `.bin` is KITTI, `.ply` is PLY.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("bin") => read_kitti_bin(path),
        Some("ply") => read_ply(path),
        _ => Err(Error::Format(format!("unknown point cloud extension: {}", path.display()))),
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("bin") => write_kitti_bin(path, cloud),
        Some("ply") => write_ply(path, cloud, &[], PlyFormat::BinaryLittleEndian),
        _ => Err(Error::Format(format!("unknown point cloud extension: {}", path.display()))),
    }
}
