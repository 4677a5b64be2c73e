//! File formats: Gaussian PLY, scene manifests, PPM/PFM images, voxel grids,
//! embedding tables and parameter checkpoints.
//!
//! Every format has an in-memory encoder/decoder pair over bytes or text plus
//! path wrappers. Decoders never panic on malformed input.

mod checkpoint;
mod embeddings;
mod grid;
mod image;
mod manifest;
mod ply;

use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, NamedArray, CHECKPOINT_MAGIC};
pub use embeddings::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, EmbeddingTable, UNIT_NORM_TOL};
pub use grid::{decode_grid, encode_grid, load_grid, save_grid, GRID_MAGIC, GRID_VERSION};
pub use image::{
    decode_pfm, decode_ppm, encode_pfm, encode_ppm, load_pfm, load_ppm, save_pfm, save_ppm, FloatImage, Image8,
};
pub use manifest::{load_manifest, load_views, save_manifest, ManifestView, SceneManifest};
pub use ply::{decode_ply, encode_ply, load_ply, save_ply};

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "{}: truncated at byte {}, needed {n} more",
                self.what, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Ensure `count` items of `size` bytes remain before allocating for them.
    pub(crate) fn expect_items(&self, count: usize, size: usize) -> Result<()> {
        match count.checked_mul(size) {
            Some(b) if b <= self.remaining() => Ok(()),
            _ => Err(Error::format(format!(
                "{}: header declares {count} items but only {} bytes follow",
                self.what,
                self.remaining()
            ))),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{}: {} trailing bytes", self.what, self.remaining())));
        }
        Ok(())
    }
}
