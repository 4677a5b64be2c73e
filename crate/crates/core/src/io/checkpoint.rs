use std::path::Path;

use super::{read_bytes, write_bytes, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

const MAX_NAME: usize = 1 << 12;

/// A named `rows × cols` array, values column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// `CKP1`, `count: u32`, then per array `name_len: u32`, UTF-8 name,
/// `rows: u32`, `cols: u32` and `rows × cols` `f64`. Little-endian.
pub fn encode_checkpoint(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        if a.data.len() != a.rows * a.cols || a.name.len() > MAX_NAME {
            return Err(Error::dims(format!("array `{}` has inconsistent shape or name", a.name)));
        }
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.rows as u32).to_le_bytes());
        out.extend_from_slice(&(a.cols as u32).to_le_bytes());
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let count = r.u32()? as usize;
    r.expect_items(count, 12)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > MAX_NAME {
            return Err(Error::format(format!("checkpoint: name of {len} bytes")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint: name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(format!("checkpoint: `{name}` shape overflows")))?;
        r.expect_items(n, 8)?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if out.iter().any(|a: &NamedArray| a.name == name) {
            return Err(Error::format(format!("checkpoint: duplicate array `{name}`")));
        }
        out.push(NamedArray { name, rows, cols, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(arrays)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedArray>> {
    decode_checkpoint(&read_bytes(path)?)
}
