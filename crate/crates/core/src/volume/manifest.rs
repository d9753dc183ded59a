//! Sidecar files for synthesis runs: a JSON-lines manifest describing every
//! inserted object, and the ground-truth CSV used by the detection harness.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One inserted nodule, one JSON object per line in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: String,
    pub center: [i64; 3],
    pub diameter_mm: f32,
    pub seed: u64,
    /// Brightness blend scalar used by the coarse composite.
    pub blend_s: f32,
    pub critic_local: f32,
    pub critic_context: f32,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("manifest line {}: {e}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Ground-truth nodule location in voxel coordinates of the named volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub volume: String,
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub diameter_mm: f32,
}

const GT_HEADER: &str = "volume,x,y,z,diameter_mm";

pub fn write_ground_truth(path: impl AsRef<Path>, rows: &[GroundTruthRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{GT_HEADER}")?;
    for r in rows {
        if r.volume.contains(',') {
            return Err(Error::format("ground truth: volume names may not contain commas"));
        }
        writeln!(w, "{},{},{},{},{}", r.volume, r.x, r.y, r.z, r.diameter_mm)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRow>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("ground truth: empty file"))??;
    if header.trim() != GT_HEADER {
        return Err(Error::format(format!("ground truth: bad header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::format(format!("ground truth line {}: expected 5 fields", i + 2)));
        }
        let num = |s: &str| -> Result<f32> {
            s.trim()
                .parse::<f32>()
                .map_err(|_| Error::format(format!("ground truth line {}: bad number {s:?}", i + 2)))
        };
        out.push(GroundTruthRow {
            volume: parts[0].trim().to_string(),
            x: num(parts[1])?,
            y: num(parts[2])?,
            z: num(parts[3])?,
            diameter_mm: num(parts[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry {
                volume: "vol_000.svox".into(),
                center: [40, 41, 20],
                diameter_mm: 7.5,
                seed: 9,
                blend_s: 1.02,
                critic_local: -0.3,
                critic_context: 0.1,
            },
            ManifestEntry {
                volume: "vol_001.svox".into(),
                center: [10, 12, 8],
                diameter_mm: 5.0,
                seed: 10,
                blend_s: 0.97,
                critic_local: 0.4,
                critic_context: -0.2,
            },
        ];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
        // One JSON object per line.
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn ground_truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        let rows = vec![
            GroundTruthRow { volume: "a".into(), x: 1.0, y: 2.0, z: 3.0, diameter_mm: 6.0 },
            GroundTruthRow { volume: "b".into(), x: 4.5, y: 5.5, z: 6.5, diameter_mm: 8.25 },
        ];
        write_ground_truth(&p, &rows).unwrap();
        assert_eq!(read_ground_truth(&p).unwrap(), rows);
    }

    #[test]
    fn ground_truth_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "vol,cx,cy,cz,d\na,1,2,3,4\n").unwrap();
        assert!(read_ground_truth(&p).is_err());
    }
}
