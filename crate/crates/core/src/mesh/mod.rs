//! Triangle meshes: the spherical template, isosurface extraction from voxel
//! masks, non-rigid CPD registration, rescaling, and rasterization back to
//! voxel masks.
//!
//! Vertices are stored in voxel units unless a function documents otherwise.
//! A mesh is "closed" when every undirected edge is shared by exactly two
//! faces; the template and everything derived from it keep that property.

mod cpd;
mod isosurface;
mod raster;
mod template;

pub use cpd::{cpd_register, CpdConfig, CpdFit};
pub use isosurface::marching_cubes;
pub use raster::{rasterize_mesh, rescale_mesh, RasterResult};
pub use template::make_template_sphere;

use crate::{Error, Result};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// Identifies the template topology for fitted meshes; None for free
    /// topology (e.g. marching cubes output).
    pub template_id: Option<String>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(Error::geometry("mesh: empty vertex or face list"));
        }
        let n = self.vertices.len() as u32;
        for f in &self.faces {
            if f.iter().any(|i| *i >= n) {
                return Err(Error::geometry("mesh: face references missing vertex"));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::geometry("mesh: degenerate face"));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::geometry("mesh: non-finite vertex"));
        }
        Ok(())
    }

    /// Count of faces adjacent to every undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(u32, u32), u32> {
        let mut map = HashMap::with_capacity(self.faces.len() * 3 / 2);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *map.entry(key).or_insert(0) += 1;
            }
        }
        map
    }

    /// Closed 2-manifold check: every edge shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|c| *c == 2)
    }

    pub fn euler_characteristic(&self) -> i64 {
        let v = self.vertices.len() as i64;
        let e = self.edge_face_counts().len() as i64;
        let f = self.faces.len() as i64;
        v - e + f
    }

    pub fn centroid(&self) -> [f32; 3] {
        let mut c = [0.0f64; 3];
        for v in &self.vertices {
            for a in 0..3 {
                c[a] += v[a] as f64;
            }
        }
        let n = self.vertices.len() as f64;
        [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32]
    }

    /// Axis-aligned bounding box as (min, max), or None for empty meshes.
    pub fn bbox(&self) -> Option<([f32; 3], [f32; 3])> {
        if self.vertices.is_empty() {
            return None;
        }
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }
}

/// Save a mesh in the SVMESH text format: a header "SVMESH <N> <F>", then N
/// vertex lines "x y z", then F face lines "i j k" with 0-based indices.
pub fn save_mesh(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    mesh.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "SVMESH {} {}", mesh.vertices.len(), mesh.faces.len())?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
    }
    for f in &mesh.faces {
        writeln!(w, "{} {} {}", f[0], f[1], f[2])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::format("svmesh: empty file"))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "SVMESH" {
        return Err(Error::format(format!("svmesh: bad header {header:?}")));
    }
    let n: usize = parts[1].parse().map_err(|_| Error::format("svmesh: bad vertex count"))?;
    let f: usize = parts[2].parse().map_err(|_| Error::format("svmesh: bad face count"))?;
    let mut vertices = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(f);
    for i in 0..n + f {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(format!("svmesh: truncated at line {}", i + 2)))??;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::format(format!("svmesh: line {} needs 3 fields", i + 2)));
        }
        if i < n {
            let mut v = [0f32; 3];
            for (a, s) in fields.iter().enumerate() {
                v[a] = s
                    .parse::<f32>()
                    .map_err(|_| Error::format(format!("svmesh: bad coordinate {s:?}")))?;
            }
            vertices.push(v);
        } else {
            let mut t = [0u32; 3];
            for (a, s) in fields.iter().enumerate() {
                t[a] = s
                    .parse::<u32>()
                    .map_err(|_| Error::format(format!("svmesh: bad index {s:?}")))?;
            }
            faces.push(t);
        }
    }
    if lines.next().is_some() {
        return Err(Error::format("svmesh: trailing lines"));
    }
    let mesh = Mesh { vertices, faces, template_id: None };
    mesh.validate()?;
    Ok(mesh)
}
