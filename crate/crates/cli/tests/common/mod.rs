#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsvox::alignment::{EmbeddingBatch, Modality};
use gsvox::io::{encode_embeddings, EmbeddingTable};

pub const BIN: &str = env!("CARGO_BIN_EXE_gsvox");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn gsvox")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Stdout of a successful run, or a description of the failure.
pub fn try_run(args: &[&str]) -> Result<String, String> {
    let o = run(args);
    if o.status.success() {
        Ok(stdout(&o))
    } else {
        Err(format!("gsvox {} exited with {:?}: {}", args.join(" "), o.status.code(), stderr(&o).trim()))
    }
}

pub fn ok(args: &[&str]) -> String {
    try_run(args).unwrap_or_else(|e| panic!("{e}"))
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("UTF-8 temp path")
}

/// Every file below `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).expect("read dir").map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Column `name` of a CSV file with a header row.
pub fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).expect("read csv");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(col).unwrap_or("").to_string()).collect()
}

pub fn write_embeddings(path: &Path, modality: Modality, dim: usize, rows: &[Vec<f64>]) {
    let raw: Vec<f64> = rows.iter().flatten().copied().collect();
    let table = EmbeddingTable {
        ids: (0..rows.len()).map(|i| format!("item{i:03}")).collect(),
        batch: EmbeddingBatch::new(modality, dim, raw).expect("embedding batch"),
    };
    std::fs::write(path, encode_embeddings(&table)).expect("write embeddings");
}
