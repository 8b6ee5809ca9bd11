//! KITTI `.bin` scans and 3×4 pose files.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

use super::{PointCloud, RigidTransform};

const RECORD: usize = 16;

/// Reads little-endian `f32 × 4` records `(x, y, z, reflectance)`; reflectance is discarded.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_bin(&bytes)
}

pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of {RECORD} bytes",
            bytes.len()
        )));
    }
    let read = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let points = bytes
        .chunks_exact(RECORD)
        .map(|r| Vector3::new(read(&r[0..4]), read(&r[4..8]), read(&r[8..12])))
        .collect();
    PointCloud::new(points)
}

/// Writes the same layout with reflectance 0. Coordinates are narrowed to `f32`.
pub fn save_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * RECORD);
    for p in cloud.points() {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One row-major 3×4 pose per non-empty line, 12 whitespace-separated decimals.
pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("pose line {}: {e}", n + 1)))?;
            let arr: [f64; 12] = vals.as_slice().try_into().map_err(|_| {
                Error::Format(format!("pose line {}: expected 12 values, got {}", n + 1, vals.len()))
            })?;
            RigidTransform::from_row_major(&arr)
        })
        .collect()
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn format_pose(t: &RigidTransform) -> String {
    t.to_row_major()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn save_poses(path: impl AsRef<Path>, poses: &[RigidTransform]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in poses {
        writeln!(f, "{}", format_pose(p)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
