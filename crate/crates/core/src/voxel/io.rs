use std::path::Path;

use super::{GridDims, LabelGrid, LabelMap, OccupancyGrid};
use crate::error::{Error, Result};

/// Parse a packed occupancy bitset.
pub fn load_occupancy(bytes: &[u8], dims: GridDims) -> Result<OccupancyGrid> {
    let expected = dims.num_voxels().div_ceil(8);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "occupancy stream for grid {dims}: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut grid = OccupancyGrid::empty(dims);
    grid.bits.copy_from_slice(bytes);
    let tail = dims.num_voxels() % 8;
    if tail != 0 {
        // Ignore padding bits so counts stay exact.
        *grid.bits.last_mut().unwrap() &= 0xFFu8 << (8 - tail);
    }
    Ok(grid)
}

pub fn encode_occupancy(grid: &OccupancyGrid) -> Vec<u8> {
    grid.bytes().to_vec()
}

/// Parse little-endian u16 raw labels, remapping through `map`.
pub fn load_labels(bytes: &[u8], dims: GridDims, map: &LabelMap) -> Result<LabelGrid> {
    let expected = dims.num_voxels() * 2;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "label stream for grid {dims}: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| map.to_internal(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    LabelGrid::from_vec(dims, labels)
}

/// Serialize labels as raw ids (smallest raw id per internal class).
pub fn encode_labels(grid: &LabelGrid, map: &LabelMap) -> Vec<u8> {
    let mut lut = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(grid.labels().len() * 2);
    for &l in grid.labels() {
        let raw = *lut.entry(l).or_insert_with(|| map.to_raw(l));
        out.extend_from_slice(&raw.to_le_bytes());
    }
    out
}

pub fn read_occupancy_file(path: &Path, dims: GridDims) -> Result<OccupancyGrid> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    load_occupancy(&bytes, dims).map_err(|e| in_file(e, path))
}

pub fn read_label_file(path: &Path, dims: GridDims, map: &LabelMap) -> Result<LabelGrid> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    load_labels(&bytes, dims, map).map_err(|e| in_file(e, path))
}

fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}
