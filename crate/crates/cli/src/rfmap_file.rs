//! `RADM` files: one RF map in dBm plus its normalization range.
//!
//! Layout (little endian): magic `RADM`, `u32` version, `u32` width,
//! `u32` height, `f64` range min, `f64` range max, then `width * height`
//! `f64` values in row-major order. Cells without a path hold `-inf`.

use radiance_core::propagation::RfMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RADM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum MapFileError {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_map(path: &Path, map: &RfMap) -> Result<(), MapFileError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * map.rss_dbm.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&map.norm_range.0.to_le_bytes());
    buf.extend_from_slice(&map.norm_range.1.to_le_bytes());
    for v in &map.rss_dbm {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<RfMap, MapFileError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| MapFileError::Invalid {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not an RF map file"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(4))));
    }
    let (width, height) = (u32_at(8) as usize, u32_at(12) as usize);
    let range = (f64_at(16), f64_at(24));
    if width == 0 || height == 0 {
        return Err(bad("empty map"));
    }
    if !(range.0 < range.1) {
        return Err(bad("normalization range is empty"));
    }
    if bytes.len() != HEADER_LEN + 8 * width * height {
        return Err(bad(&format!("expected {} values", width * height)));
    }
    let rss_dbm = (0..width * height).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
    Ok(RfMap {
        width,
        height,
        rss_dbm,
        norm_range: range,
    })
}
