//! `.svox` volume container.
//!
//! Layout, all little-endian:
//!   magic  b"SVOX"
//!   u8     version (currently 1)
//!   u8     dtype: 0 = f32 volume, 1 = u8 mask
//!   u32    nx, ny, nz
//!   f32    spacing x, y, z
//!   raw voxels, x-fastest

use super::{Domain, Volume, VoxelMask};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SVOX";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn write_header<W: Write>(w: &mut W, dtype: u8, extents: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype])?;
    for n in extents {
        let n32 = u32::try_from(n).map_err(|_| Error::format("svox: extent exceeds u32"))?;
        w.write_all(&n32.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

struct Header {
    dtype: u8,
    extents: [usize; 3],
    spacing: [f32; 3],
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format("svox: file too short for header"))?;
    if &magic != MAGIC {
        return Err(Error::format("svox: bad magic"));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb)?;
    if vb[0] != VERSION {
        return Err(Error::format(format!("svox: unsupported version {}", vb[0])));
    }
    let dtype = vb[1];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(Error::format(format!("svox: unknown dtype {dtype}")));
    }
    let mut extents = [0usize; 3];
    for e in &mut extents {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *e = u32::from_le_bytes(b) as usize;
        if *e == 0 {
            return Err(Error::format("svox: zero extent"));
        }
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *s = f32::from_le_bytes(b);
        if !(*s > 0.0) || !s.is_finite() {
            return Err(Error::format("svox: non-positive spacing"));
        }
    }
    Ok(Header { dtype, extents, spacing })
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::format("svox: trailing bytes after voxel data")),
    }
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_F32, v.extents(), v.spacing)?;
    for val in &v.data {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load an f32 volume. The container does not record the intensity domain,
/// so the caller states what it expects to find.
pub fn load_volume(path: impl AsRef<Path>, domain: Domain) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dtype != DTYPE_F32 {
        return Err(Error::format("svox: expected f32 volume, found mask dtype"));
    }
    let n = h.extents[0] * h.extents[1] * h.extents[2];
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::format("svox: truncated voxel data"))?;
    expect_eof(&mut r)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("svox: non-finite voxel value"));
    }
    Ok(Volume {
        nx: h.extents[0],
        ny: h.extents[1],
        nz: h.extents[2],
        spacing: h.spacing,
        domain,
        data,
    })
}

pub fn save_mask(path: impl AsRef<Path>, m: &VoxelMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_U8, m.extents(), m.spacing)?;
    w.write_all(&m.data)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<VoxelMask> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dtype != DTYPE_U8 {
        return Err(Error::format("svox: expected u8 mask, found f32 dtype"));
    }
    let n = h.extents[0] * h.extents[1] * h.extents[2];
    let mut data = vec![0u8; n];
    r.read_exact(&mut data).map_err(|_| Error::format("svox: truncated voxel data"))?;
    expect_eof(&mut r)?;
    if data.iter().any(|v| *v > 1) {
        return Err(Error::format("svox: mask voxels must be 0 or 1"));
    }
    Ok(VoxelMask {
        nx: h.extents[0],
        ny: h.extents[1],
        nz: h.extents[2],
        spacing: h.spacing,
        data,
    })
}
