use std::path::Path;

use super::{read_bytes, write_bytes, ByteReader};
use crate::error::{Error, Result};

/// Interleaved 8-bit RGB, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    /// Quantise linear values in `[0, 1]` (clamped) to the nearest level.
    pub fn from_f64(width: usize, height: usize, rgb: &[f64]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::dims(format!("{} values for a {width}x{height} RGB image", rgb.len())));
        }
        let data = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Self { width, height, data })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

/// Interleaved `f32` samples with 1 or 3 channels, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_f64(width: usize, height: usize, channels: usize, values: &[f64]) -> Result<Self> {
        if !(channels == 1 || channels == 3) || values.len() != channels * width * height {
            return Err(Error::dims(format!(
                "{} values for a {width}x{height}x{channels} float image",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: values.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_ppm(img: &Image8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Whitespace-separated ASCII tokens of a netpbm-style header, skipping `#`
/// comments. Returns the tokens and the offset just past the single
/// whitespace byte that ends the last one.
fn header_tokens(bytes: &[u8], count: usize, what: &str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i || i >= bytes.len() {
            return Err(Error::format(format!("{what}: truncated header")));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn dimension(tok: &str, what: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if (1..=1 << 16).contains(&v) => Ok(v),
        _ => Err(Error::format(format!("{what}: bad image dimension `{tok}`"))),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image8> {
    let (tok, body) = header_tokens(bytes, 4, "PPM")?;
    if tok[0] != "P6" {
        return Err(Error::format(format!("PPM: magic `{}` is not P6", tok[0])));
    }
    let (width, height) = (dimension(&tok[1], "PPM")?, dimension(&tok[2], "PPM")?);
    if tok[3] != "255" {
        return Err(Error::format(format!("PPM: only 8-bit images are supported, maxval {}", tok[3])));
    }
    let mut r = ByteReader::new(&bytes[body..], "PPM");
    let data = r.take(3 * width * height)?.to_vec();
    r.finish()?;
    Ok(Image8 { width, height, data })
}

/// Little-endian PFM: `Pf` for one channel, `PF` for three; rows bottom to
/// top as the format requires.
pub fn encode_pfm(img: &FloatImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatImage> {
    let (tok, body) = header_tokens(bytes, 4, "PFM")?;
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::format(format!("PFM: unknown magic `{m}`"))),
    };
    let (width, height) = (dimension(&tok[1], "PFM")?, dimension(&tok[2], "PFM")?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format(format!("PFM: bad scale `{}`", tok[3])))?;
    if !(scale < 0.0) {
        return Err(Error::format("PFM: only little-endian files (negative scale) are supported"));
    }
    let row = width * channels;
    let mut r = ByteReader::new(&bytes[body..], "PFM");
    r.expect_items(row * height, 4)?;
    let mut data = vec![0f32; row * height];
    for y in (0..height).rev() {
        for v in &mut data[y * row..(y + 1) * row] {
            *v = r.f32()?;
        }
    }
    r.finish()?;
    Ok(FloatImage {
        width,
        height,
        channels,
        data,
    })
}

pub fn save_ppm(path: &Path, img: &Image8) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn load_ppm(path: &Path) -> Result<Image8> {
    decode_ppm(&read_bytes(path)?)
}

pub fn save_pfm(path: &Path, img: &FloatImage) -> Result<()> {
    write_bytes(path, &encode_pfm(img))
}

pub fn load_pfm(path: &Path) -> Result<FloatImage> {
    decode_pfm(&read_bytes(path)?)
}
