//! 3D volume plumbing: voxel grids, HU normalization, patch extraction,
//! slice/stitch between 3D patches and 2D slice stacks, and the procedural
//! phantom generator used for end-to-end validation.
//!
//! Conventions used throughout:
//! - voxel data is stored x-fastest: `idx = x + nx*(y + ny*z)`
//! - spacing is millimetres per voxel along (x, y, z)
//! - physical position of voxel (x, y, z) is `(x*sx, y*sy, z*sz)`

mod manifest;
mod phantom;
mod svox;

pub use manifest::{
    read_ground_truth, read_manifest, write_ground_truth, write_manifest, GroundTruthRow,
    ManifestEntry,
};
pub use phantom::{gen_phantom_volume, PhantomNodule, PhantomSpec, PhantomVolume};
pub use svox::{load_mask, load_volume, save_mask, save_volume};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Intensity domain of a volume or patch. HU is raw CT-like data; Norm255 is
/// the [0, 255] range the 2D networks consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Hu,
    Norm255,
}

pub const HU_CLIP_MIN: f32 = -1024.0;
pub const HU_CLIP_MAX: f32 = 600.0;

/// Patch grid: 64 x 64 x 32 voxels at (0.6, 0.6, 1.0) mm.
pub const PATCH_NX: usize = 64;
pub const PATCH_NY: usize = 64;
pub const PATCH_NZ: usize = 32;
pub const PATCH_SPACING: [f32; 3] = [0.6, 0.6, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f32; 3],
    pub domain: Domain,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], domain: Domain) -> Result<Self> {
        let [nx, ny, nz] = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::shape("volume extents must be positive"));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::shape("volume spacing must be positive and finite"));
        }
        Ok(Self { nx, ny, nz, spacing, domain, data: vec![0.0; nx * ny * nz] })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Trilinear sample at a continuous voxel-space coordinate. Out-of-range
    /// coordinates clamp to the border voxel.
    pub fn sample_trilinear(&self, p: [f32; 3]) -> f32 {
        let clampf = |v: f32, hi: usize| v.max(0.0).min((hi - 1) as f32);
        let x = clampf(p[0], self.nx);
        let y = clampf(p[1], self.ny);
        let z = clampf(p[2], self.nz);
        let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
        let x1 = (x0 + 1).min(self.nx - 1);
        let y1 = (y0 + 1).min(self.ny - 1);
        let z1 = (z0 + 1).min(self.nz - 1);
        let (fx, fy, fz) = (x - x0 as f32, y - y0 as f32, z - z0 as f32);
        let mut acc = 0.0;
        for (zc, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yc, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xc, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    acc += self.at(xc, yc, zc) * wx * wy * wz;
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

impl VoxelMask {
    pub fn new(extents: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let [nx, ny, nz] = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::shape("mask extents must be positive"));
        }
        Ok(Self { nx, ny, nz, spacing, data: vec![0; nx * ny * nz] })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    /// Inclusive voxel bounding box of the set voxels, or None when empty.
    pub fn bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..self.nz {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    if self.at(x, y, z) != 0 {
                        any = true;
                        let p = [x, y, z];
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Morphological dilation by a voxel-space ball of radius `r`.
    pub fn dilate(&self, r: usize) -> VoxelMask {
        let mut offsets = Vec::new();
        let ri = r as i64;
        for dz in -ri..=ri {
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dx * dx + dy * dy + dz * dz <= ri * ri {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        let mut out = VoxelMask {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            spacing: self.spacing,
            data: vec![0; self.data.len()],
        };
        for z in 0..self.nz {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    if self.at(x, y, z) == 0 {
                        continue;
                    }
                    for off in &offsets {
                        let px = x as i64 + off[0];
                        let py = y as i64 + off[1];
                        let pz = z as i64 + off[2];
                        if px >= 0
                            && py >= 0
                            && pz >= 0
                            && (px as usize) < self.nx
                            && (py as usize) < self.ny
                            && (pz as usize) < self.nz
                        {
                            out.set(px as usize, py as usize, pz as usize, 1);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Map a single HU value to the [0, 255] display range: clip to
/// [-1024, 600], then rescale linearly.
#[inline]
pub fn hu_to_norm(hu: f32) -> f32 {
    let c = hu.clamp(HU_CLIP_MIN, HU_CLIP_MAX);
    255.0 * (c - HU_CLIP_MIN) / (HU_CLIP_MAX - HU_CLIP_MIN)
}

/// Normalize an HU volume into the [0, 255] range the 2D stages consume.
/// Errors when the input is already normalized.
pub fn normalize_hu(v: &Volume) -> Result<Volume> {
    if v.domain != Domain::Hu {
        return Err(Error::config("normalize_hu: volume is already normalized"));
    }
    let mut out = v.clone();
    out.domain = Domain::Norm255;
    for val in &mut out.data {
        *val = hu_to_norm(*val);
    }
    Ok(out)
}

/// One axial slice of a patch: 64 x 64 pixels in [0, 255] plus an optional
/// binary mask slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch2d {
    pub pixels: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Patch2d {
    pub fn npix() -> usize {
        PATCH_NX * PATCH_NY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch3d {
    pub data: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    /// Voxel coordinate in the source volume the patch was centred on.
    pub center: [i64; 3],
    /// True when any part of the patch window fell outside the volume and
    /// was zero-padded.
    pub clipped: bool,
    pub domain: Domain,
}

impl Patch3d {
    #[inline]
    pub fn idx(x: usize, y: usize, z: usize) -> usize {
        x + PATCH_NX * (y + PATCH_NY * z)
    }

    pub fn numel() -> usize {
        PATCH_NX * PATCH_NY * PATCH_NZ
    }
}

fn spacing_matches(a: [f32; 3], b: [f32; 3]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6)
}

/// Extract a 64 x 64 x 32 patch at (0.6, 0.6, 1.0) mm centred on a voxel
/// coordinate. When the source grid already has patch spacing this is a
/// direct crop; otherwise the patch is resampled trilinearly at the patch
/// grid's physical positions. Regions outside the volume are zero-padded
/// and flagged via `clipped`.
pub fn extract_patch(v: &Volume, center: [i64; 3], mask: Option<&VoxelMask>) -> Result<Patch3d> {
    if let Some(m) = mask {
        if m.extents() != v.extents() {
            return Err(Error::shape("extract_patch: mask extents differ from volume"));
        }
    }
    let half = [PATCH_NX as i64 / 2, PATCH_NY as i64 / 2, PATCH_NZ as i64 / 2];
    let ext = [v.nx as i64, v.ny as i64, v.nz as i64];
    let mut data = vec![0.0f32; Patch3d::numel()];
    let mut mdata = mask.map(|_| vec![0u8; Patch3d::numel()]);
    let mut clipped = false;

    if spacing_matches(v.spacing, PATCH_SPACING) {
        for pz in 0..PATCH_NZ {
            for py in 0..PATCH_NY {
                for px in 0..PATCH_NX {
                    let sx = center[0] - half[0] + px as i64;
                    let sy = center[1] - half[1] + py as i64;
                    let sz = center[2] - half[2] + pz as i64;
                    let inside = sx >= 0 && sy >= 0 && sz >= 0 && sx < ext[0] && sy < ext[1] && sz < ext[2];
                    if inside {
                        let di = Patch3d::idx(px, py, pz);
                        data[di] = v.at(sx as usize, sy as usize, sz as usize);
                        if let (Some(md), Some(m)) = (mdata.as_mut(), mask) {
                            md[di] = m.at(sx as usize, sy as usize, sz as usize);
                        }
                    } else {
                        clipped = true;
                    }
                }
            }
        }
    } else {
        // Resample: patch voxel (px,py,pz) sits at a physical offset from the
        // centre voxel's physical position; convert back to source voxel
        // coordinates for interpolation.
        let cphys = [
            center[0] as f32 * v.spacing[0],
            center[1] as f32 * v.spacing[1],
            center[2] as f32 * v.spacing[2],
        ];
        for pz in 0..PATCH_NZ {
            for py in 0..PATCH_NY {
                for px in 0..PATCH_NX {
                    let off = [
                        (px as i64 - half[0]) as f32 * PATCH_SPACING[0],
                        (py as i64 - half[1]) as f32 * PATCH_SPACING[1],
                        (pz as i64 - half[2]) as f32 * PATCH_SPACING[2],
                    ];
                    let src = [
                        (cphys[0] + off[0]) / v.spacing[0],
                        (cphys[1] + off[1]) / v.spacing[1],
                        (cphys[2] + off[2]) / v.spacing[2],
                    ];
                    let inside = (0..3).all(|a| src[a] >= 0.0 && src[a] <= (ext[a] - 1) as f32);
                    let di = Patch3d::idx(px, py, pz);
                    if inside {
                        data[di] = v.sample_trilinear(src);
                        if let (Some(md), Some(m)) = (mdata.as_mut(), mask) {
                            // Nearest-neighbour for the binary mask.
                            let nx = src[0].round() as usize;
                            let ny = src[1].round() as usize;
                            let nz = src[2].round() as usize;
                            md[di] = m.at(nx.min(m.nx - 1), ny.min(m.ny - 1), nz.min(m.nz - 1));
                        }
                    } else {
                        clipped = true;
                    }
                }
            }
        }
    }

    Ok(Patch3d { data, mask: mdata, center, clipped, domain: v.domain })
}

/// Split a 3D patch into its 32 axial slices.
pub fn slice_patch(p: &Patch3d) -> Vec<Patch2d> {
    let npix = Patch2d::npix();
    (0..PATCH_NZ)
        .map(|z| Patch2d {
            pixels: p.data[z * npix..(z + 1) * npix].to_vec(),
            mask: p.mask.as_ref().map(|m| m[z * npix..(z + 1) * npix].to_vec()),
        })
        .collect()
}

/// Reassemble 32 axial slices into a 3D patch. Inverse of `slice_patch`:
/// `stitch_slices(&slice_patch(&p), ...)` reproduces `p.data` exactly.
pub fn stitch_slices(slices: &[Patch2d], center: [i64; 3], domain: Domain) -> Result<Patch3d> {
    if slices.len() != PATCH_NZ {
        return Err(Error::shape(format!(
            "stitch_slices: expected {} slices, got {}",
            PATCH_NZ,
            slices.len()
        )));
    }
    let npix = Patch2d::npix();
    let with_mask = slices[0].mask.is_some();
    let mut data = Vec::with_capacity(Patch3d::numel());
    let mut mdata = with_mask.then(|| Vec::with_capacity(Patch3d::numel()));
    for (i, s) in slices.iter().enumerate() {
        if s.pixels.len() != npix {
            return Err(Error::shape(format!("stitch_slices: slice {i} has wrong pixel count")));
        }
        if s.mask.is_some() != with_mask {
            return Err(Error::shape("stitch_slices: inconsistent mask presence across slices"));
        }
        data.extend_from_slice(&s.pixels);
        if let (Some(md), Some(m)) = (mdata.as_mut(), s.mask.as_ref()) {
            if m.len() != npix {
                return Err(Error::shape(format!("stitch_slices: slice {i} has wrong mask count")));
            }
            md.extend_from_slice(m);
        }
    }
    Ok(Patch3d { data, mask: mdata, center, clipped: false, domain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_volume(extents: [usize; 3]) -> Volume {
        let mut v = Volume::new(extents, PATCH_SPACING, Domain::Hu).unwrap();
        for i in 0..v.data.len() {
            v.data[i] = i as f32;
        }
        v
    }

    #[test]
    fn normalize_hits_documented_anchor_points() {
        assert_eq!(hu_to_norm(-1024.0), 0.0);
        assert_eq!(hu_to_norm(600.0), 255.0);
        assert_eq!(hu_to_norm(-2000.0), 0.0, "below-range values clip to 0");
        assert_eq!(hu_to_norm(2000.0), 255.0, "above-range values clip to 255");
        // 255 * (-212 + 1024) / 1624 with 812/1624 = 1/2 exactly.
        assert!((hu_to_norm(-212.0) - 127.5).abs() < 1e-4);
    }

    #[test]
    fn normalize_is_monotone_and_bounded() {
        let mut prev = -1.0f32;
        let mut hu = -1500.0f32;
        while hu < 1100.0 {
            let n = hu_to_norm(hu);
            assert!((0.0..=255.0).contains(&n));
            assert!(n >= prev, "normalization must be monotone");
            prev = n;
            hu += 7.3;
        }
    }

    #[test]
    fn normalize_rejects_already_normalized_volume() {
        let v = Volume::new([4, 4, 4], PATCH_SPACING, Domain::Hu).unwrap();
        let n = normalize_hu(&v).unwrap();
        assert_eq!(n.domain, Domain::Norm255);
        assert!(normalize_hu(&n).is_err());
    }

    #[test]
    fn constant_volume_gives_constant_patch() {
        let mut v = Volume::new([80, 80, 40], PATCH_SPACING, Domain::Hu).unwrap();
        v.data.fill(-850.0);
        let p = extract_patch(&v, [40, 40, 20], None).unwrap();
        assert!(!p.clipped);
        assert!(p.data.iter().all(|x| *x == -850.0));
    }

    #[test]
    fn ramp_patch_matches_index_oracle() {
        let v = ramp_volume([80, 80, 40]);
        let c = [40i64, 40, 20];
        let p = extract_patch(&v, c, None).unwrap();
        for pz in 0..PATCH_NZ {
            for py in 0..PATCH_NY {
                for px in 0..PATCH_NX {
                    let sx = (c[0] - 32 + px as i64) as usize;
                    let sy = (c[1] - 32 + py as i64) as usize;
                    let sz = (c[2] - 16 + pz as i64) as usize;
                    let expect = (sx + 80 * (sy + 80 * sz)) as f32;
                    assert_eq!(p.data[Patch3d::idx(px, py, pz)], expect);
                }
            }
        }
    }

    #[test]
    fn repeated_extraction_is_identical() {
        let v = ramp_volume([80, 80, 40]);
        let a = extract_patch(&v, [33, 47, 19], None).unwrap();
        let b = extract_patch(&v, [33, 47, 19], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn border_patch_is_zero_padded_and_flagged() {
        let mut v = Volume::new([80, 80, 40], PATCH_SPACING, Domain::Hu).unwrap();
        v.data.fill(7.0);
        let p = extract_patch(&v, [0, 0, 0], None).unwrap();
        assert!(p.clipped);
        // Voxel (0,0,0) of the patch maps to source (-32,-32,-16): padded.
        assert_eq!(p.data[Patch3d::idx(0, 0, 0)], 0.0);
        // The centre voxel maps to source (0,0,0): real data.
        assert_eq!(p.data[Patch3d::idx(32, 32, 16)], 7.0);
        let q = extract_patch(&v, [40, 40, 20], None).unwrap();
        assert!(!q.clipped);
    }

    #[test]
    fn mask_is_cropped_alongside_data() {
        let v = ramp_volume([80, 80, 40]);
        let mut m = VoxelMask::new([80, 80, 40], PATCH_SPACING).unwrap();
        m.set(42, 40, 20, 1);
        let p = extract_patch(&v, [40, 40, 20], Some(&m)).unwrap();
        let pm = p.mask.as_ref().unwrap();
        assert_eq!(pm.iter().map(|x| *x as usize).sum::<usize>(), 1);
        assert_eq!(pm[Patch3d::idx(34, 32, 16)], 1);
    }

    #[test]
    fn anisotropic_volume_is_resampled_to_patch_grid() {
        // A volume at 1.2mm in-plane spacing holding a pure x-gradient in
        // physical units: f(p) = x_mm. Trilinear resampling reproduces the
        // gradient exactly, so patch voxels step by 0.6mm.
        let mut v = Volume::new([80, 80, 40], [1.2, 1.2, 1.0], Domain::Hu).unwrap();
        for z in 0..40 {
            for y in 0..80 {
                for x in 0..80 {
                    v.set(x, y, z, x as f32 * 1.2);
                }
            }
        }
        let p = extract_patch(&v, [40, 40, 20], None).unwrap();
        assert!(!p.clipped);
        let base = p.data[Patch3d::idx(0, 30, 16)];
        for px in 1..PATCH_NX {
            let got = p.data[Patch3d::idx(px, 30, 16)];
            assert!(
                (got - (base + px as f32 * 0.6)).abs() < 1e-3,
                "px={px} got={got} want={}",
                base + px as f32 * 0.6
            );
        }
    }

    #[test]
    fn slice_then_stitch_is_exact_round_trip() {
        let v = ramp_volume([80, 80, 40]);
        let mut m = VoxelMask::new([80, 80, 40], PATCH_SPACING).unwrap();
        for dz in 0..3 {
            m.set(40, 40, 19 + dz, 1);
        }
        let p = extract_patch(&v, [40, 40, 20], Some(&m)).unwrap();
        let slices = slice_patch(&p);
        assert_eq!(slices.len(), PATCH_NZ);
        let back = stitch_slices(&slices, p.center, p.domain).unwrap();
        assert_eq!(back.data, p.data);
        assert_eq!(back.mask, p.mask);
    }

    #[test]
    fn slice_mask_area_sums_to_3d_count() {
        let v = ramp_volume([80, 80, 40]);
        let mut m = VoxelMask::new([80, 80, 40], PATCH_SPACING).unwrap();
        for dz in 0..5 {
            for dy in 0..4 {
                m.set(40 + dy, 40, 18 + dz, 1);
            }
        }
        let p = extract_patch(&v, [40, 40, 20], Some(&m)).unwrap();
        let slices = slice_patch(&p);
        let total: usize = slices
            .iter()
            .map(|s| s.mask.as_ref().unwrap().iter().map(|x| *x as usize).sum::<usize>())
            .sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn stitch_rejects_wrong_slice_count() {
        let slices = vec![Patch2d { pixels: vec![0.0; Patch2d::npix()], mask: None }; 31];
        assert!(stitch_slices(&slices, [0, 0, 0], Domain::Norm255).is_err());
    }

    #[test]
    fn dilation_grows_by_ball_radius() {
        let mut m = VoxelMask::new([21, 21, 21], PATCH_SPACING).unwrap();
        m.set(10, 10, 10, 1);
        let d = m.dilate(3);
        let expect: usize = {
            let mut c = 0;
            for dz in -3i64..=3 {
                for dy in -3i64..=3 {
                    for dx in -3i64..=3 {
                        if dx * dx + dy * dy + dz * dz <= 9 {
                            c += 1;
                        }
                    }
                }
            }
            c
        };
        assert_eq!(d.count_ones(), expect);
        assert_eq!(d.at(13, 10, 10), 1);
        assert_eq!(d.at(14, 10, 10), 0);
    }

    proptest! {
        #[test]
        fn stitch_inverts_slice_for_arbitrary_patches(seed in 0u64..1000) {
            let mut rng = crate::rng::stream_rng(seed, "prop-slice");
            let mut data = vec![0.0f32; Patch3d::numel()];
            for v in &mut data {
                *v = rand::Rng::random_range(&mut rng, 0.0..255.0);
            }
            let p = Patch3d { data, mask: None, center: [0, 0, 0], clipped: false, domain: Domain::Norm255 };
            let back = stitch_slices(&slice_patch(&p), p.center, p.domain).unwrap();
            prop_assert_eq!(back.data, p.data);
        }

        #[test]
        fn normalize_stays_in_range(hu in -3000.0f32..3000.0) {
            let n = hu_to_norm(hu);
            prop_assert!((0.0..=255.0).contains(&n));
        }
    }
}
