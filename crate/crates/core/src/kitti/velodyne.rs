//! Velodyne point cloud I/O: packed little-endian f32 quadruples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectance: f32,
}

pub fn read_velodyne(bytes: &[u8]) -> Result<Vec<LidarPoint>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            "velodyne data",
            format!("length {} is not a multiple of 16", bytes.len()),
        ));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    Ok(bytes
        .chunks_exact(16)
        .map(|c| LidarPoint {
            x: f(&c[0..4]),
            y: f(&c[4..8]),
            z: f(&c[8..12]),
            reflectance: f(&c[12..16]),
        })
        .collect())
}

pub fn write_velodyne(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        out.extend_from_slice(&p.reflectance.to_le_bytes());
    }
    out
}

pub fn load_velodyne(path: &Path) -> Result<Vec<LidarPoint>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_velodyne(&bytes)
}
