use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::alignment::{EmbeddingBatch, Modality};
use crate::error::{Error, Result};

/// Allowed deviation of a stored row's norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Identified, unit-normalised embeddings of a single modality.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub batch: EmbeddingBatch,
}

/// One line per row: `id<TAB>modality<TAB>v1<TAB>…<TAB>vD`, normalised rows
/// in shortest round-trip decimal form.
pub fn encode_embeddings(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (i, id) in table.ids.iter().enumerate() {
        out.push_str(id);
        out.push('\t');
        out.push_str(&table.batch.modality.to_string());
        for v in table.batch.row(i) {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn decode_embeddings(text: &str) -> Result<EmbeddingTable> {
    let parse = |line: usize, msg: String| Error::Parse { line, msg };
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut shape: Option<(Modality, usize)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse(line, "expected id, modality and at least one value".into()));
        }
        let modality: Modality = fields[1].parse().map_err(|_| parse(line, format!("unknown modality `{}`", fields[1])))?;
        let row = fields[2..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse(line, format!("bad number `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse(line, "non-finite value".into()));
        }
        match shape {
            None => shape = Some((modality, row.len())),
            Some((m, d)) if m != modality || d != row.len() => {
                return Err(parse(line, format!("row is {modality}/{} but the table is {m}/{d}", row.len())));
            }
            _ => {}
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(parse(line, format!("row norm {norm} is not 1 within {UNIT_NORM_TOL:e}")));
        }
        ids.push(fields[0].to_string());
        values.extend(row);
    }
    let (modality, dim) = shape.ok_or_else(|| Error::format("embedding table is empty"))?;
    Ok(EmbeddingTable {
        ids,
        batch: EmbeddingBatch::from_unit_rows(modality, dim, values)?,
    })
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_bytes(path, encode_embeddings(table).as_bytes())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(format!("{}: not UTF-8", path.display())))?;
    decode_embeddings(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let batch = EmbeddingBatch::new(Modality::S, 3, vec![1.0, 2.0, 2.0, 0.3, -0.1, 7.0]).unwrap();
        let t = EmbeddingTable {
            ids: vec!["a".into(), "b".into()],
            batch,
        };
        let text = encode_embeddings(&t);
        let back = decode_embeddings(&text).unwrap();
        assert_eq!(back.ids, t.ids);
        assert_eq!(back.batch.rows, t.batch.rows);
        assert!(text.starts_with("a\tS\t"));
        assert!(matches!(decode_embeddings("x\tS\t1\t1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(decode_embeddings("x\tS\t1\t0\ny\tP\t0\t1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(decode_embeddings("x\tQ\t1\n"), Err(Error::Parse { .. })));
        assert!(matches!(decode_embeddings("x\tS\t1\ty\tS\t1\n"), Err(Error::Parse { .. })));
        assert!(decode_embeddings("").is_err());
    }
}
