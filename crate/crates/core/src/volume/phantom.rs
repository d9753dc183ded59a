//! Procedural chest phantom generator.
//!
//! Produces an HU volume with a noisy low-intensity lung field inside an
//! ellipsoidal boundary shell, bright tubular vessels, and synthetic nodules
//! rendered as deformed ellipsoids with soft intensity falloff. Everything is
//! a pure function of the spec, so the same seed reproduces the volume
//! bit for bit.

use super::{Domain, Volume, VoxelMask};
use crate::rng::stream_rng;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub nodule_count: usize,
    /// Requested nodule diameter range in millimetres, sampled uniformly.
    pub diameter_mm: [f32; 2],
    /// Added HU contrast of nodules over the lung field, sampled uniformly.
    pub contrast_hu: [f32; 2],
    pub vessel_count: usize,
    /// Vessel radius range in voxels.
    pub vessel_radius: [f32; 2],
    /// Amplitude of the lung background noise in HU.
    pub noise_amp: f32,
    /// Amplitude of intra-nodule texture in HU.
    pub texture_amp: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extents: [96, 96, 48],
            spacing: [0.6, 0.6, 1.0],
            nodule_count: 4,
            diameter_mm: [5.0, 12.0],
            contrast_hu: [500.0, 800.0],
            vessel_count: 6,
            vessel_radius: [1.0, 2.2],
            noise_amp: 70.0,
            texture_amp: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomNodule {
    pub center: [usize; 3],
    pub diameter_mm: f32,
    pub contrast_hu: f32,
    pub mask: VoxelMask,
}

#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub volume: Volume,
    /// Interior region where nodules may be placed (lung, eroded away from
    /// the wall).
    pub lung_mask: VoxelMask,
    pub nodules: Vec<PhantomNodule>,
}

const LUNG_HU: f32 = -850.0;
const WALL_HU: f32 = 0.0;
const VESSEL_HU: f32 = -30.0;
const MAX_PLACE_ATTEMPTS: usize = 200;

#[inline]
fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f32 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x as u64, y as u64, z as u64] {
        h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h = h.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    }
    ((h >> 40) as f32 / 8_388_607.5) - 1.0
}

#[inline]
fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in [-1, 1] with cells of `cell`
/// voxels.
fn value_noise(seed: u64, p: [f32; 3], cell: f32) -> f32 {
    let q = [p[0] / cell, p[1] / cell, p[2] / cell];
    let base = [q[0].floor(), q[1].floor(), q[2].floor()];
    let f = [
        smoothstep(0.0, 1.0, q[0] - base[0]),
        smoothstep(0.0, 1.0, q[1] - base[1]),
        smoothstep(0.0, 1.0, q[2] - base[2]),
    ];
    let (bx, by, bz) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - f[2]), (1, f[2])] {
        for (dy, wy) in [(0, 1.0 - f[1]), (1, f[1])] {
            for (dx, wx) in [(0, 1.0 - f[0]), (1, f[0])] {
                acc += lattice(seed, bx + dx, by + dy, bz + dz) * wx * wy * wz;
            }
        }
    }
    acc
}

/// Three-octave fractal noise, normalized back into [-1, 1].
fn fbm(seed: u64, p: [f32; 3], cell0: f32) -> f32 {
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut cell = cell0;
    let mut norm = 0.0;
    for o in 0..3u64 {
        acc += amp * value_noise(seed.wrapping_add(o.wrapping_mul(0x9e37)), p, cell);
        norm += amp;
        amp *= 0.5;
        cell *= 0.5;
    }
    acc / norm
}

struct LungGeometry {
    center: [f32; 3],
    /// Ellipsoid semi-axes in voxels.
    semi: [f32; 3],
}

impl LungGeometry {
    fn of(extents: [usize; 3]) -> Self {
        let center = [
            (extents[0] as f32 - 1.0) / 2.0,
            (extents[1] as f32 - 1.0) / 2.0,
            (extents[2] as f32 - 1.0) / 2.0,
        ];
        let semi = [
            0.46 * extents[0] as f32,
            0.46 * extents[1] as f32,
            0.46 * extents[2] as f32,
        ];
        Self { center, semi }
    }

    /// Normalized ellipsoid radius: < 1 inside the lung, 1 on the boundary.
    #[inline]
    fn re(&self, p: [f32; 3]) -> f32 {
        let dx = (p[0] - self.center[0]) / self.semi[0];
        let dy = (p[1] - self.center[1]) / self.semi[1];
        let dz = (p[2] - self.center[2]) / self.semi[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

struct Vessel {
    a: [f32; 3],
    b: [f32; 3],
    r: f32,
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.extents.iter().any(|e| *e < 32) {
        return Err(Error::config("phantom: extents must be at least 32 voxels per axis"));
    }
    if spec.spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config("phantom: spacing must be positive"));
    }
    let [dmin, dmax] = spec.diameter_mm;
    if !(dmin > 0.0) || dmax < dmin {
        return Err(Error::config("phantom: bad diameter range"));
    }
    if !(4.0..=30.0).contains(&dmin) || !(4.0..=30.0).contains(&dmax) {
        return Err(Error::config("phantom: nodule diameters must lie in [4, 30] mm"));
    }
    let smax = spec.spacing.iter().cloned().fold(0.0f32, f32::max);
    // Below ~5 voxel grid spacings the voxelized extent can miss the
    // requested diameter by more than the 20% tolerance.
    if dmin < 5.0 * smax {
        return Err(Error::config(format!(
            "phantom: minimum diameter {dmin} mm is under 5x the coarsest spacing {smax} mm"
        )));
    }
    if spec.contrast_hu[0] <= 0.0 || spec.contrast_hu[1] < spec.contrast_hu[0] {
        return Err(Error::config("phantom: bad contrast range"));
    }
    Ok(())
}

pub fn gen_phantom_volume(spec: &PhantomSpec) -> Result<PhantomVolume> {
    validate(spec)?;
    let lung = LungGeometry::of(spec.extents);
    let mut vol = Volume::new(spec.extents, spec.spacing, Domain::Hu)?;
    let [nx, ny, nz] = spec.extents;

    // Background: noisy lung field blended into the boundary wall.
    let noise_seed = spec.seed ^ 0x6c75_6e67; // salt the lattice per field
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f32, y as f32, z as f32];
                let re = lung.re(p);
                let lung_v = LUNG_HU + spec.noise_amp * fbm(noise_seed, p, 12.0);
                let wall_w = smoothstep(0.94, 1.0, re);
                vol.set(x, y, z, lung_v * (1.0 - wall_w) + WALL_HU * wall_w);
            }
        }
    }

    // Vessels: random capsules kept inside the lung.
    let mut vrng = stream_rng(spec.seed, "phantom/vessels");
    let min_ext = *spec.extents.iter().min().unwrap() as f32;
    let mut vessels = Vec::with_capacity(spec.vessel_count);
    for _ in 0..spec.vessel_count {
        let a = loop {
            let cand = [
                vrng.random_range(0.0..nx as f32),
                vrng.random_range(0.0..ny as f32),
                vrng.random_range(0.0..nz as f32),
            ];
            if lung.re(cand) < 0.7 {
                break cand;
            }
        };
        let dir = {
            let mut d;
            loop {
                d = [
                    vrng.random_range(-1.0f32..1.0),
                    vrng.random_range(-1.0f32..1.0),
                    vrng.random_range(-1.0f32..1.0),
                ];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if n > 0.1 {
                    d = [d[0] / n, d[1] / n, d[2] / n];
                    break;
                }
            }
            d
        };
        let len = vrng.random_range(0.3..0.5) * min_ext;
        let b = [a[0] + dir[0] * len, a[1] + dir[1] * len, a[2] + dir[2] * len];
        let r = vrng.random_range(spec.vessel_radius[0]..=spec.vessel_radius[1]);
        vessels.push(Vessel { a, b, r });
    }
    for v in &vessels {
        render_vessel(&mut vol, &lung, v, spec.seed);
    }

    // Nodules: rejection-packed deformed ellipsoids.
    let mut nrng = stream_rng(spec.seed, "phantom/nodules");
    let mut placed: Vec<(usize, [usize; 3], f32)> = Vec::new(); // (index, center, radius_mm)
    let mut nodules = Vec::with_capacity(spec.nodule_count);
    for i in 0..spec.nodule_count {
        let d_mm = nrng.random_range(spec.diameter_mm[0]..=spec.diameter_mm[1]);
        let contrast = nrng.random_range(spec.contrast_hu[0]..=spec.contrast_hu[1]);
        // Per-axis shrink, renormalized so the largest semi-axis matches the
        // requested radius.
        let mut jitter = [
            nrng.random_range(0.8f32..1.0),
            nrng.random_range(0.8f32..1.0),
            nrng.random_range(0.8f32..1.0),
        ];
        let jmax = jitter.iter().cloned().fold(0.0f32, f32::max);
        for j in &mut jitter {
            *j /= jmax;
        }
        let semi_mm = [d_mm / 2.0 * jitter[0], d_mm / 2.0 * jitter[1], d_mm / 2.0 * jitter[2]];
        let semi_vox = [
            semi_mm[0] / spec.spacing[0],
            semi_mm[1] / spec.spacing[1],
            semi_mm[2] / spec.spacing[2],
        ];
        // How far the nodule surface can push out in normalized lung
        // coordinates. Both ellipsoids are axis-aligned, so the exact bound
        // is the largest per-axis ratio; 1.1 covers the surface deformation.
        let dre = 1.1
            * (semi_vox[0] / lung.semi[0])
                .max(semi_vox[1] / lung.semi[1])
                .max(semi_vox[2] / lung.semi[2]);

        let mut center = None;
        for _ in 0..MAX_PLACE_ATTEMPTS {
            let c = [
                nrng.random_range(0..nx),
                nrng.random_range(0..ny),
                nrng.random_range(0..nz),
            ];
            if lung.re([c[0] as f32, c[1] as f32, c[2] as f32]) + dre > 0.88 {
                continue;
            }
            let clear = placed.iter().all(|(_, pc, pr)| {
                let dx = (c[0] as f32 - pc[0] as f32) * spec.spacing[0];
                let dy = (c[1] as f32 - pc[1] as f32) * spec.spacing[1];
                let dz = (c[2] as f32 - pc[2] as f32) * spec.spacing[2];
                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                dist >= pr + d_mm / 2.0 + 2.0
            });
            if clear {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or_else(|| {
            Error::geometry(format!(
                "phantom: could not place nodule {i} after {MAX_PLACE_ATTEMPTS} attempts; \
                 volume is too crowded for the requested count and sizes"
            ))
        })?;
        placed.push((i, center, d_mm / 2.0));

        let mask = render_nodule(&mut vol, spec, center, semi_mm, contrast, spec.seed ^ (i as u64) << 32);
        nodules.push(PhantomNodule { center, diameter_mm: d_mm, contrast_hu: contrast, mask });
    }

    let mut lung_mask = VoxelMask::new(spec.extents, spec.spacing)?;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if lung.re([x as f32, y as f32, z as f32]) < 0.88 {
                    lung_mask.set(x, y, z, 1);
                }
            }
        }
    }

    Ok(PhantomVolume { volume: vol, lung_mask, nodules })
}

fn render_vessel(vol: &mut Volume, lung: &LungGeometry, v: &Vessel, seed: u64) {
    let pad = v.r + 2.0;
    let lo = [
        (v.a[0].min(v.b[0]) - pad).floor().max(0.0) as usize,
        (v.a[1].min(v.b[1]) - pad).floor().max(0.0) as usize,
        (v.a[2].min(v.b[2]) - pad).floor().max(0.0) as usize,
    ];
    let hi = [
        ((v.a[0].max(v.b[0]) + pad).ceil() as usize).min(vol.nx - 1),
        ((v.a[1].max(v.b[1]) + pad).ceil() as usize).min(vol.ny - 1),
        ((v.a[2].max(v.b[2]) + pad).ceil() as usize).min(vol.nz - 1),
    ];
    let ab = [v.b[0] - v.a[0], v.b[1] - v.a[1], v.b[2] - v.a[2]];
    let ab2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x as f32, y as f32, z as f32];
                if lung.re(p) >= 0.97 {
                    continue;
                }
                let ap = [p[0] - v.a[0], p[1] - v.a[1], p[2] - v.a[2]];
                let t = if ab2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / ab2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let cx = [v.a[0] + t * ab[0], v.a[1] + t * ab[1], v.a[2] + t * ab[2]];
                let d = ((p[0] - cx[0]).powi(2) + (p[1] - cx[1]).powi(2) + (p[2] - cx[2]).powi(2)).sqrt();
                // 1 well inside the capsule, 0 past the soft rim.
                let w = 1.0 - smoothstep(v.r - 0.5, v.r + 1.0, d);
                if w > 0.0 {
                    let tex = VESSEL_HU + 20.0 * fbm(seed ^ 0x7665_7373, p, 6.0);
                    let cur = vol.at(x, y, z);
                    vol.set(x, y, z, cur * (1.0 - w) + tex * w);
                }
            }
        }
    }
}

fn render_nodule(
    vol: &mut Volume,
    spec: &PhantomSpec,
    center: [usize; 3],
    semi_mm: [f32; 3],
    contrast: f32,
    seed: u64,
) -> VoxelMask {
    let mut mask = VoxelMask::new(spec.extents, spec.spacing).expect("extents validated");
    let semi_vox = [
        semi_mm[0] / spec.spacing[0],
        semi_mm[1] / spec.spacing[1],
        semi_mm[2] / spec.spacing[2],
    ];
    let lo = [
        (center[0] as f32 - semi_vox[0] * 1.2 - 2.0).floor().max(0.0) as usize,
        (center[1] as f32 - semi_vox[1] * 1.2 - 2.0).floor().max(0.0) as usize,
        (center[2] as f32 - semi_vox[2] * 1.2 - 2.0).floor().max(0.0) as usize,
    ];
    let hi = [
        ((center[0] as f32 + semi_vox[0] * 1.2 + 2.0).ceil() as usize).min(spec.extents[0] - 1),
        ((center[1] as f32 + semi_vox[1] * 1.2 + 2.0).ceil() as usize).min(spec.extents[1] - 1),
        ((center[2] as f32 + semi_vox[2] * 1.2 + 2.0).ceil() as usize).min(spec.extents[2] - 1),
    ];
    let bump_cell = semi_vox.iter().cloned().fold(f32::MAX, f32::min).max(2.0);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let dphys = [
                    (x as f32 - center[0] as f32) * spec.spacing[0],
                    (y as f32 - center[1] as f32) * spec.spacing[1],
                    (z as f32 - center[2] as f32) * spec.spacing[2],
                ];
                let rho0 = ((dphys[0] / semi_mm[0]).powi(2)
                    + (dphys[1] / semi_mm[1]).powi(2)
                    + (dphys[2] / semi_mm[2]).powi(2))
                .sqrt();
                let p = [x as f32, y as f32, z as f32];
                // Surface deformation keeps the extent within +-5% of the
                // nominal ellipsoid, well inside the 20% diameter tolerance.
                let bump = 0.05 * fbm(seed ^ 0x6e6f_6475, p, bump_cell);
                let rho = rho0 * (1.0 + bump);
                if rho <= 1.0 {
                    mask.set(x, y, z, 1);
                }
                // Intensity plateau with a soft rim just past the mask edge.
                let f = 1.0 - smoothstep(0.85, 1.1, rho);
                if f > 0.0 {
                    let tex = spec.texture_amp * fbm(seed ^ 0x7465_7874, p, 3.0);
                    let v = vol.at(x, y, z) + (contrast + tex) * f;
                    vol.set(x, y, z, v.min(550.0));
                }
            }
        }
    }
    mask
}
