//! Spherical template construction.

use super::Mesh;

/// Build the unit-radius, origin-centered template sphere.
///
/// Tessellation is a UV sphere with `3*level` latitude stacks and `5*level`
/// longitude sectors, giving exactly `(3*level - 1) * 5*level + 2` vertices.
/// `level = 10` produces the canonical 1452-vertex template. The 3:5 ratio
/// keeps faces close to equilateral; vertex order (north pole, stacks top to
/// bottom, south pole) is deterministic.
pub fn make_template_sphere(level: usize) -> Mesh {
    let level = level.max(1);
    let stacks = 3 * level;
    let sectors = 5 * level;

    let mut vertices: Vec<[f32; 3]> = Vec::with_capacity((stacks - 1) * sectors + 2);
    vertices.push([0.0, 0.0, 1.0]);
    for i in 1..stacks {
        let theta = std::f64::consts::PI * i as f64 / stacks as f64;
        let (st, ct) = theta.sin_cos();
        for j in 0..sectors {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / sectors as f64;
            let (sp, cp) = phi.sin_cos();
            vertices.push([(st * cp) as f32, (st * sp) as f32, ct as f32]);
        }
    }
    vertices.push([0.0, 0.0, -1.0]);

    let ring = |i: usize, j: usize| -> u32 { (1 + (i - 1) * sectors + (j % sectors)) as u32 };
    let north = 0u32;
    let south = (vertices.len() - 1) as u32;

    let mut faces: Vec<[u32; 3]> = Vec::with_capacity(2 * sectors * (stacks - 1));
    for j in 0..sectors {
        faces.push([north, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..sectors {
            let a = ring(i, j);
            let b = ring(i, j + 1);
            let c = ring(i + 1, j);
            let d = ring(i + 1, j + 1);
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    for j in 0..sectors {
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }

    // Enforce outward winding; the sphere is convex and origin-centered so
    // the face centroid direction decides it.
    for f in &mut faces {
        let p0 = vertices[f[0] as usize];
        let p1 = vertices[f[1] as usize];
        let p2 = vertices[f[2] as usize];
        let u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let v = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let c = [p0[0] + p1[0] + p2[0], p0[1] + p1[1] + p2[1], p0[2] + p1[2] + p2[2]];
        if n[0] * c[0] + n[1] * c[1] + n[2] * c[2] < 0.0 {
            f.swap(1, 2);
        }
    }

    Mesh { vertices, faces, template_id: Some(format!("uv-sphere-{level}")) }
}
