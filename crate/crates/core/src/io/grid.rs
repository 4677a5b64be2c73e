use std::path::Path;

use nalgebra::Vector3;

use super::{read_bytes, write_bytes, ByteReader};
use crate::error::{Error, Result};
use crate::gaussian::CHANNELS;
use crate::voxel::VoxelGrid;

pub const GRID_MAGIC: &[u8; 4] = b"VXG1";
pub const GRID_VERSION: u8 = 1;

/// Largest lattice side accepted when reading.
const MAX_SIDE: usize = 1024;

/// `VXG1`, version byte, `n: u32`, `channels: u32`, bounds `lo, hi` as six
/// `f64`, `n³ × channels` features (cell-major, x fastest), then the `n³`
/// source indices as `u32`. All little-endian.
pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let cells = grid.cells();
    let mut out = Vec::with_capacity(4 + 1 + 8 + 48 + cells * (CHANNELS * 8 + 4));
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    out.extend_from_slice(&(grid.n as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for v in grid.bounds.0.iter().chain(grid.bounds.1.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &grid.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &a in &grid.assignment {
        out.extend_from_slice(&(a as u32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut r = ByteReader::new(bytes, "voxel grid");
    if r.take(4)? != GRID_MAGIC {
        return Err(Error::format("voxel grid: bad magic"));
    }
    let version = r.u8()?;
    if version != GRID_VERSION {
        return Err(Error::format(format!("voxel grid: unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if !(2..=MAX_SIDE).contains(&n) || channels != CHANNELS {
        return Err(Error::format(format!("voxel grid: bad shape n = {n}, channels = {channels}")));
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64()?;
    }
    let cells = n * n * n;
    r.expect_items(cells, CHANNELS * 8 + 4)?;
    let features = (0..cells * CHANNELS).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let assignment = (0..cells).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let grid = VoxelGrid {
        n,
        bounds: (Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5])),
        features,
        assignment,
    };
    grid.validate()?;
    Ok(grid)
}

pub fn save_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_bytes(path, &encode_grid(grid))
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    decode_grid(&read_bytes(path)?)
}
