use std::path::Path;

use nalgebra::Vector3;

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "f_dc_0", "f_dc_1",
    "f_dc_2",
];

const COMMENT: &str = "comment scale_* are log scales, opacity is a logit, rot_* is (w, x, y, z), f_dc_* is linear RGB";

/// Binary little-endian PLY with raw (optimiser-space) parameters stored as
/// doubles.
pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\n{COMMENT}\nelement vertex {}\n",
        cloud.len()
    );
    for p in PROPERTIES {
        header.push_str(&format!("property double {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * PROPERTIES.len() * 8);
    for g in cloud.iter() {
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

struct Header {
    count: usize,
    /// `(type, byte offset)` of each property, in file order.
    props: Vec<(String, Scalar, usize)>,
    stride: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| parse_err(1, "missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| parse_err(1, "header is not UTF-8"))?;
    let mut count = None;
    let mut props: Vec<(String, Scalar, usize)> = Vec::new();
    let mut stride = 0;
    let mut lines = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        lines = line;
        let tok: Vec<&str> = raw.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] if line == 1 => {}
            _ if line == 1 => return Err(parse_err(1, "file does not start with `ply`")),
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", f, ..] => return Err(parse_err(line, format!("unsupported format `{f}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_err(line, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| parse_err(line, format!("bad vertex count `{n}`")))?);
            }
            ["element", name, ..] => return Err(parse_err(line, format!("unsupported element `{name}`"))),
            ["property", "list", ..] => return Err(parse_err(line, "list properties are not supported")),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(parse_err(line, "property before element"));
                }
                let s = Scalar::parse(ty).ok_or_else(|| parse_err(line, format!("unknown property type `{ty}`")))?;
                if props.iter().any(|p| p.0 == *name) {
                    return Err(parse_err(line, format!("duplicate property `{name}`")));
                }
                props.push((name.to_string(), s, stride));
                stride += s.size();
            }
            _ => return Err(parse_err(line, format!("unrecognised header line `{raw}`"))),
        }
    }
    if lines == 0 {
        return Err(parse_err(1, "empty header"));
    }
    let count = count.ok_or_else(|| parse_err(lines + 1, "no vertex element"))?;
    for p in PROPERTIES {
        if !props.iter().any(|q| q.0 == p) {
            return Err(parse_err(lines + 1, format!("missing property `{p}`")));
        }
    }
    Ok(Header {
        count,
        props,
        stride,
        body: end + 11,
    })
}

/// Accepts any scalar property types and extra properties; the 14 named
/// properties are required.
pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let h = parse_header(bytes)?;
    let body = &bytes[h.body..];
    let need = h.count.checked_mul(h.stride).filter(|&b| b == body.len());
    if need.is_none() {
        return Err(Error::format(format!(
            "PLY body holds {} bytes, header declares {} vertices of {} bytes",
            body.len(),
            h.count,
            h.stride
        )));
    }
    let slots: Vec<(Scalar, usize)> = PROPERTIES
        .iter()
        .map(|p| {
            let q = h.props.iter().find(|q| q.0 == *p).expect("checked in header");
            (q.1, q.2)
        })
        .collect();
    let mut out = Vec::with_capacity(h.count);
    for rec in body.chunks_exact(h.stride.max(1)).take(h.count) {
        let v: Vec<f64> = slots.iter().map(|&(s, off)| s.read(&rec[off..off + s.size()])).collect();
        out.push(Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    Ok(GaussianCloud::new(out))
}

pub fn save_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_bytes(path, &encode_ply(cloud))
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    decode_ply(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::demo_scene;

    fn bits(c: &GaussianCloud) -> Vec<u64> {
        c.iter().flat_map(|g| g.to_raw()).map(f64::to_bits).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = demo_scene();
        let back = decode_ply(&encode_ply(&c)).unwrap();
        assert_eq!(bits(&back), bits(&c));
        let empty = decode_ply(&encode_ply(&GaussianCloud::default())).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn float_files_with_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float nx\n".to_vec();
        for p in PROPERTIES {
            bytes.extend_from_slice(format!("property float {p}\n").as_bytes());
        }
        bytes.extend_from_slice(b"end_header\n");
        for i in 0..15 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let c = decode_ply(&bytes).unwrap();
        assert_eq!(c.gaussians[0].position, Vector3::new(0.5, 1.0, 1.5));
        assert_eq!(c.gaussians[0].color.z, 7.0);
    }

    #[test]
    fn malformed_headers_report_lines() {
        let good = String::from_utf8_lossy(&encode_ply(&GaussianCloud::default())).to_string();
        let bad = good.replace("property double rot_2", "property quad rot_2");
        match decode_ply(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }
        let ascii = good.replace("binary_little_endian", "ascii");
        assert!(matches!(decode_ply(ascii.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let missing = good.replace("property double opacity\n", "");
        assert!(matches!(decode_ply(missing.as_bytes()), Err(Error::Parse { .. })));
        assert!(decode_ply(b"").is_err());
        assert!(decode_ply(b"plyx\nend_header\n").is_err());
    }
}
