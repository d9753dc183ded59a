//! Isosurface extraction from binary voxel masks.
//!
//! Cells are decomposed into six tetrahedra sharing the cube's main diagonal,
//! and the isosurface is triangulated per tetrahedron. The split is the same
//! in every cell, so shared cube faces carry the same diagonal and the result
//! is closed by construction, with no case table to get wrong.

use super::Mesh;
use crate::volume::VoxelMask;
use crate::{Error, Result};
use std::collections::HashMap;

// Cube corners indexed by bits (x, y, z); tets listed so each contains the
// 0-7 main diagonal.
const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Extract the iso-level surface of a binary mask; vertices come out in
/// voxel coordinates (grid points are voxel centers). The mask must be
/// non-empty and must not touch the volume border (pad first).
pub fn marching_cubes(mask: &VoxelMask, iso: f32) -> Result<Mesh> {
    if !(0.0 < iso && iso < 1.0) {
        return Err(Error::config("marching_cubes: iso level must be in (0, 1)"));
    }
    if mask.count_ones() == 0 {
        return Err(Error::geometry("marching_cubes: empty mask"));
    }
    let (nx, ny, nz) = (mask.nx, mask.ny, mask.nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let border = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                if border && mask.at(x, y, z) != 0 {
                    return Err(Error::geometry(
                        "marching_cubes: mask touches the volume border; pad first",
                    ));
                }
            }
        }
    }

    let gid = |x: usize, y: usize, z: usize| -> u64 { (x + nx * (y + ny * z)) as u64 };
    let mut vert_of_edge: HashMap<(u64, u64), u32> = HashMap::new();
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    // Interpolated crossing on the grid edge (a, b); deduplicated so every
    // tetrahedron containing the edge reuses the same mesh vertex.
    fn crossing(
        vertices: &mut Vec<[f32; 3]>,
        vert_of_edge: &mut HashMap<(u64, u64), u32>,
        iso: f32,
        (ga, pa, fa): (u64, [usize; 3], f32),
        (gb, pb, fb): (u64, [usize; 3], f32),
    ) -> u32 {
        let key = (ga.min(gb), ga.max(gb));
        if let Some(id) = vert_of_edge.get(&key) {
            return *id;
        }
        let t = ((iso - fa) / (fb - fa)).clamp(1e-4, 1.0 - 1e-4);
        let p = [
            pa[0] as f32 + t * (pb[0] as f32 - pa[0] as f32),
            pa[1] as f32 + t * (pb[1] as f32 - pa[1] as f32),
            pa[2] as f32 + t * (pb[2] as f32 - pa[2] as f32),
        ];
        let id = vertices.len() as u32;
        vertices.push(p);
        vert_of_edge.insert(key, id);
        id
    }

    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut f = [0f32; 8];
                let mut p = [[0usize; 3]; 8];
                let mut any_in = false;
                let mut any_out = false;
                for c in 0..8 {
                    let q = [x + CORNER[c][0], y + CORNER[c][1], z + CORNER[c][2]];
                    let v = mask.at(q[0], q[1], q[2]) as f32;
                    p[c] = q;
                    f[c] = v;
                    if v >= iso {
                        any_in = true;
                    } else {
                        any_out = true;
                    }
                }
                if !(any_in && any_out) {
                    continue;
                }
                let g = [
                    gid(p[0][0], p[0][1], p[0][2]),
                    gid(p[1][0], p[1][1], p[1][2]),
                    gid(p[2][0], p[2][1], p[2][2]),
                    gid(p[3][0], p[3][1], p[3][2]),
                    gid(p[4][0], p[4][1], p[4][2]),
                    gid(p[5][0], p[5][1], p[5][2]),
                    gid(p[6][0], p[6][1], p[6][2]),
                    gid(p[7][0], p[7][1], p[7][2]),
                ];
                for tet in &TETS {
                    let inside: Vec<usize> = tet.iter().copied().filter(|c| f[*c] >= iso).collect();
                    let outside: Vec<usize> = tet.iter().copied().filter(|c| f[*c] < iso).collect();
                    let mut cross = |a: usize, b: usize| -> u32 {
                        crossing(
                            &mut vertices,
                            &mut vert_of_edge,
                            iso,
                            (g[a], p[a], f[a]),
                            (g[b], p[b], f[b]),
                        )
                    };
                    let tris: Vec<[u32; 3]> = match inside.len() {
                        1 => {
                            let a = inside[0];
                            let v: Vec<u32> = outside.iter().map(|b| cross(a, *b)).collect();
                            vec![[v[0], v[1], v[2]]]
                        }
                        3 => {
                            let b = outside[0];
                            let v: Vec<u32> = inside.iter().map(|a| cross(*a, b)).collect();
                            vec![[v[0], v[1], v[2]]]
                        }
                        2 => {
                            let (a1, a2) = (inside[0], inside[1]);
                            let (b1, b2) = (outside[0], outside[1]);
                            let p11 = cross(a1, b1);
                            let p12 = cross(a1, b2);
                            let p21 = cross(a2, b1);
                            let p22 = cross(a2, b2);
                            // Ring p11-p12-p22-p21: consecutive crossings
                            // share a tetrahedron vertex.
                            vec![[p11, p12, p22], [p11, p22, p21]]
                        }
                        _ => continue,
                    };
                    // Orient outward: from the inside corners toward the
                    // outside corners of this tetrahedron.
                    let mut dir = [0f32; 3];
                    for b in &outside {
                        for a in 0..3 {
                            dir[a] += p[*b][a] as f32 / outside.len() as f32;
                        }
                    }
                    for i in &inside {
                        for a in 0..3 {
                            dir[a] -= p[*i][a] as f32 / inside.len() as f32;
                        }
                    }
                    for mut tri in tris {
                        let (v0, v1, v2) = (
                            vertices[tri[0] as usize],
                            vertices[tri[1] as usize],
                            vertices[tri[2] as usize],
                        );
                        let e1 = [v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]];
                        let e2 = [v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]];
                        let n = [
                            e1[1] * e2[2] - e1[2] * e2[1],
                            e1[2] * e2[0] - e1[0] * e2[2],
                            e1[0] * e2[1] - e1[1] * e2[0],
                        ];
                        if n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2] < 0.0 {
                            tri.swap(1, 2);
                        }
                        faces.push(tri);
                    }
                }
            }
        }
    }

    let mesh = Mesh { vertices, faces, template_id: None };
    mesh.validate()?;
    Ok(mesh)
}
