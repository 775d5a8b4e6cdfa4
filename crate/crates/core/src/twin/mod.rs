//! Digital-twin mesh: ingestion, local cropping, surface sampling and the
//! spatial index used for closest-point and ray queries.

mod index;
mod sample;

pub use index::{ClosestHit, RayHit, SpatialIndex};
pub use sample::{sample_surface, SurfaceSamples};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

/// Triangles whose doubled area falls below this are dropped on ingestion.
const DEGENERATE_AREA2: f64 = 1e-12;

/// Default half width of the registration crop window (150 m x 150 m).
pub const DEFAULT_CROP_HALF_EXTENT: f64 = 75.0;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh contains no valid triangles")]
    Empty,
    #[error("unsupported mesh format `{0}`")]
    UnsupportedFormat(String),
    #[error("crop window contains no triangles")]
    EmptyCrop,
    #[error("sampling density must be positive, got {0}")]
    InvalidDensity(f64),
}

fn parse_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse { line, message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self, MeshError> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "obj" => Ok(Self::Obj),
            Some(e) if e == "ply" => Ok(Self::PlyAscii),
            other => Err(MeshError::UnsupportedFormat(other.unwrap_or_default())),
        }
    }
}

/// Triangle mesh in the world (ENU) frame with flat per-face normals.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    normals: Vec<Vector3<f64>>,
}

/// Result of ingesting a mesh file.
#[derive(Clone, Debug)]
pub struct LoadedMesh {
    pub mesh: TwinMesh,
    pub degenerate_dropped: usize,
}

impl TwinMesh {
    /// Builds a mesh, dropping zero-area triangles. Returns the mesh and the
    /// number of dropped triangles.
    pub fn from_parts(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<(Self, usize), MeshError> {
        let mut kept = Vec::with_capacity(triangles.len());
        let mut normals = Vec::with_capacity(triangles.len());
        let mut dropped = 0;
        for (i, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= vertices.len()) {
                return Err(parse_err(0, format!("triangle {i} references a missing vertex")));
            }
            let [a, b, c] = tri.map(|v| vertices[v as usize]);
            let cross = (b - a).cross(&(c - a));
            let n = cross.norm();
            if !(n > DEGENERATE_AREA2) {
                dropped += 1;
                continue;
            }
            kept.push(*tri);
            normals.push(cross / n);
        }
        if kept.is_empty() {
            return Err(MeshError::Empty);
        }
        Ok((Self { vertices, triangles: kept, normals }, dropped))
    }

    pub fn load(path: &Path) -> Result<LoadedMesh, MeshError> {
        let format = MeshFormat::from_path(path)?;
        let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, format)
    }

    pub fn parse(text: &str, format: MeshFormat) -> Result<LoadedMesh, MeshError> {
        let (vertices, triangles) = match format {
            MeshFormat::Obj => parse_obj(text)?,
            MeshFormat::PlyAscii => parse_ply(text)?,
        };
        let (mesh, degenerate_dropped) = Self::from_parts(vertices, triangles)?;
        Ok(LoadedMesh { mesh, degenerate_dropped })
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        let text = match MeshFormat::from_path(path)? {
            MeshFormat::Obj => self.to_obj_string(),
            MeshFormat::PlyAscii => self.to_ply_string(),
        };
        std::fs::write(path, text).map_err(|source| MeshError::Io { path: path.to_path_buf(), source })
    }

    /// OBJ text with shortest round-trip float formatting, so a save/load
    /// cycle reproduces every coordinate bit for bit.
    pub fn to_obj_string(&self) -> String {
        let mut out = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn to_ply_string(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.vertices.len());
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        let _ = writeln!(out, "element face {}", self.triangles.len());
        out.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
        }
        out
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.len()).map(|i| self.area(i)).sum()
    }

    /// Axis-aligned bounds `(min, max)` over all vertices.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    /// Concatenates two meshes.
    pub fn merged(&self, other: &TwinMesh) -> TwinMesh {
        let offset = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| t.map(|v| v + offset)));
        let mut normals = self.normals.clone();
        normals.extend_from_slice(&other.normals);
        TwinMesh { vertices, triangles, normals }
    }

    /// Builds a mesh from a subset of triangles, keeping only referenced
    /// vertices (in first-use order).
    fn subset(&self, keep: &[usize]) -> TwinMesh {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut triangles = Vec::with_capacity(keep.len());
        for &i in keep {
            let tri = self.triangles[i].map(|v| {
                *remap.entry(v).or_insert_with(|| {
                    vertices.push(self.vertices[v as usize]);
                    (vertices.len() - 1) as u32
                })
            });
            triangles.push(tri);
        }
        let normals = keep.iter().map(|&i| self.normals[i]).collect();
        TwinMesh { vertices, triangles, normals }
    }

    pub fn build_index(&self, leaf_size: usize) -> SpatialIndex {
        SpatialIndex::build(self, leaf_size)
    }
}

fn parse_f64(tok: Option<&str>, line: usize, what: &str) -> Result<f64, MeshError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    let v: f64 = tok.parse().map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {what}")));
    }
    Ok(v)
}

/// Fan-triangulates a polygon given by vertex indices.
fn fan(poly: &[u32], out: &mut Vec<[u32; 3]>) {
    for k in 1..poly.len() - 1 {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn parse_obj(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<[u32; 3]>), MeshError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), line, "x coordinate")?;
                let y = parse_f64(toks.next(), line, "y coordinate")?;
                let z = parse_f64(toks.next(), line, "z coordinate")?;
                vertices.push(Vector3::new(x, y, z));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in toks {
                    let idx_tok = tok.split('/').next().unwrap_or("");
                    let idx: i64 =
                        idx_tok.parse().map_err(|_| parse_err(line, format!("invalid face index `{tok}`")))?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err(line, "face index 0 is invalid"));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err(line, format!("face index {idx} out of range")));
                    }
                    poly.push(resolved as u32);
                }
                if poly.len() < 3 {
                    return Err(parse_err(line, "face needs at least three vertices"));
                }
                fan(&poly, &mut triangles);
            }
            // Only vertex and face records are meaningful; everything else
            // (groups, normals, materials, blank lines) is skipped.
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

fn parse_ply(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<[u32; 3]>), MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((line, _)) => return Err(parse_err(line, "missing `ply` magic")),
        None => return Err(parse_err(1, "empty file")),
    }

    #[derive(PartialEq)]
    enum Section {
        None,
        Vertex,
        Face,
        Other,
    }
    let mut section = Section::None;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (line, l) in lines.by_ref() {
        last_line = line;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(parse_err(line, format!("only ascii PLY is supported, found `{fmt}`")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| parse_err(line, "invalid element count"))?;
                section = match *name {
                    "vertex" => {
                        n_vertices = count;
                        Section::Vertex
                    }
                    "face" => {
                        n_faces = count;
                        Section::Face
                    }
                    _ => {
                        if count > 0 {
                            return Err(parse_err(line, format!("unsupported element `{name}`")));
                        }
                        Section::Other
                    }
                };
            }
            ["property", "list", ..] => {
                if section != Section::Face {
                    return Err(parse_err(line, "list property outside the face element"));
                }
            }
            ["property", _ty, name] => {
                if section == Section::Vertex {
                    vertex_props.push((*name).to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            [] => {}
            _ => return Err(parse_err(line, format!("unexpected header line `{l}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(last_line, "missing end_header"));
    }
    let pos = |name: &str| vertex_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(last_line, "vertex element needs x, y and z properties")),
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut triangles = Vec::with_capacity(n_faces);
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for _ in 0..n_vertices {
        let (line, l) = body.next().ok_or_else(|| parse_err(last_line, "truncated vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let x = parse_f64(toks.get(ix).copied(), line, "x coordinate")?;
        let y = parse_f64(toks.get(iy).copied(), line, "y coordinate")?;
        let z = parse_f64(toks.get(iz).copied(), line, "z coordinate")?;
        vertices.push(Vector3::new(x, y, z));
        last_line = line;
    }
    for _ in 0..n_faces {
        let (line, l) = body.next().ok_or_else(|| parse_err(last_line, "truncated face list"))?;
        let mut toks = l.split_whitespace();
        let n: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(line, "invalid face vertex count"))?;
        if n < 3 {
            return Err(parse_err(line, "face needs at least three vertices"));
        }
        let mut poly = Vec::with_capacity(n);
        for _ in 0..n {
            let idx: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(line, "invalid face index"))?;
            if idx >= vertices.len() {
                return Err(parse_err(line, format!("face index {idx} out of range")));
            }
            poly.push(idx as u32);
        }
        fan(&poly, &mut triangles);
        last_line = line;
    }
    Ok((vertices, triangles))
}

/// Mesh subset restricted to a horizontal window around a center point.
#[derive(Clone, Debug)]
pub struct LocalCrop {
    pub mesh: TwinMesh,
    pub center: Vector3<f64>,
    pub half_extent_xy: f64,
}

impl LocalCrop {
    pub fn build_index(&self, leaf_size: usize) -> SpatialIndex {
        self.mesh.build_index(leaf_size)
    }
}

/// Keeps every triangle with at least one vertex whose (x, y) lies within
/// `half_extent_xy` of the center; the vertical extent is unrestricted.
pub fn crop_local(mesh: &TwinMesh, center: &Vector3<f64>, half_extent_xy: f64) -> Result<LocalCrop, MeshError> {
    let inside = |v: &Vector3<f64>| (v.x - center.x).abs() <= half_extent_xy && (v.y - center.y).abs() <= half_extent_xy;
    let keep: Vec<usize> = (0..mesh.len())
        .filter(|&i| mesh.triangles[i].iter().any(|&v| inside(&mesh.vertices[v as usize])))
        .collect();
    if keep.is_empty() {
        return Err(MeshError::EmptyCrop);
    }
    Ok(LocalCrop { mesh: mesh.subset(&keep), center: *center, half_extent_xy })
}
