use std::path::{Path, PathBuf};

use gsvox::diffusion::{ConditionBundle, DiffusionItem};
use gsvox::io::{
    load_checkpoint, load_grid, load_manifest, load_views, save_checkpoint, save_grid, save_manifest, save_pfm, save_ppm,
    FloatImage, Image8, ManifestView, NamedArray, SceneManifest,
};
use gsvox::raster::RenderOutput;
use gsvox::view::TrainingView;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "items.json";

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Write `<stem>.ppm`, `<stem>_depth.pfm` and `<stem>_normal.pfm`, returning
/// their file names.
pub fn save_frame(
    dir: &Path,
    stem: &str,
    width: usize,
    height: usize,
    color: &[f64],
    depth: Option<&[f64]>,
    normal: Option<&[f64]>,
) -> Result<(PathBuf, Option<PathBuf>, Option<PathBuf>), CliError> {
    let color_name = PathBuf::from(format!("{stem}.ppm"));
    save_ppm(&dir.join(&color_name), &Image8::from_f64(width, height, color)?)?;
    let write_float = |suffix: &str, channels: usize, values: Option<&[f64]>| -> Result<Option<PathBuf>, CliError> {
        let Some(values) = values else { return Ok(None) };
        let name = PathBuf::from(format!("{stem}_{suffix}.pfm"));
        save_pfm(&dir.join(&name), &FloatImage::from_f64(width, height, channels, values)?)?;
        Ok(Some(name))
    };
    let depth_name = write_float("depth", 1, depth)?;
    let normal_name = write_float("normal", 3, normal)?;
    Ok((color_name, depth_name, normal_name))
}

pub fn save_render(dir: &Path, stem: &str, out: &RenderOutput) -> Result<(), CliError> {
    save_frame(dir, stem, out.width, out.height, &out.color, Some(&out.depth), Some(&out.normal)).map(|_| ())
}

/// Images plus `manifest.json` for `views` in `dir`.
pub fn save_scene(dir: &Path, views: &[TrainingView], bounds: Option<[[f64; 3]; 2]>) -> Result<PathBuf, CliError> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let c = &v.camera;
        let (color, depth, normal) = save_frame(
            dir,
            &format!("view_{i:03}"),
            c.width,
            c.height,
            &v.color,
            v.depth.as_deref(),
            v.normal.as_deref(),
        )?;
        entries.push(ManifestView::from_camera(c, color, depth, normal));
    }
    let path = dir.join(MANIFEST_FILE);
    save_manifest(&path, &SceneManifest { views: entries, bounds })?;
    Ok(path)
}

pub fn load_scene(path: &Path) -> Result<(SceneManifest, Vec<TrainingView>), CliError> {
    let m = load_manifest(path)?;
    let views = load_views(path, &m)?;
    Ok((m, views))
}

/// One object of a diffusion dataset; paths relative to the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub grid: PathBuf,
    /// Checkpoint with `sketch_tokens` (L×C) and `text` (1×C).
    pub condition: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub items: Vec<DatasetEntry>,
}

pub fn matrix_array(name: &str, m: &DMatrix<f64>) -> NamedArray {
    NamedArray {
        name: name.into(),
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.as_slice().to_vec(),
    }
}

pub fn array_matrix(arrays: &[NamedArray], name: &str) -> Result<DMatrix<f64>, CliError> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| CliError::Usage(format!("checkpoint has no array `{name}`")))?;
    Ok(DMatrix::from_column_slice(a.rows, a.cols, &a.data))
}

pub fn save_dataset(dir: &Path, names: &[&str], items: &[DiffusionItem]) -> Result<(), CliError> {
    create_dir(dir)?;
    let mut index = DatasetIndex { items: Vec::new() };
    for (name, item) in names.iter().zip(items) {
        let entry = DatasetEntry {
            name: name.to_string(),
            grid: format!("{name}.vxg").into(),
            condition: format!("{name}_condition.ckp").into(),
            manifest: PathBuf::from(name).join(MANIFEST_FILE),
        };
        save_grid(&dir.join(&entry.grid), &item.grid)?;
        save_checkpoint(
            &dir.join(&entry.condition),
            &[
                matrix_array("sketch_tokens", &item.condition.sketch_tokens),
                matrix_array("text", &item.condition.text_embedding),
            ],
        )?;
        let (lo, hi) = item.grid.bounds;
        save_scene(&dir.join(name), &item.views, Some([lo.into(), hi.into()]))?;
        index.items.push(entry);
    }
    let json = serde_json::to_string_pretty(&index).expect("index serialises") + "\n";
    write_text(&dir.join(DATASET_FILE), &json)
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<String>, Vec<DiffusionItem>), CliError> {
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if index.items.is_empty() {
        return Err(CliError::Usage(format!("{}: no items", path.display())));
    }
    let mut names = Vec::new();
    let mut items = Vec::new();
    for e in &index.items {
        let cond = load_checkpoint(&dir.join(&e.condition))?;
        let condition = ConditionBundle::new(array_matrix(&cond, "sketch_tokens")?, array_matrix(&cond, "text")?)?;
        let (_, views) = load_scene(&dir.join(&e.manifest))?;
        items.push(DiffusionItem {
            grid: load_grid(&dir.join(&e.grid))?,
            condition,
            views,
        });
        names.push(e.name.clone());
    }
    Ok((names, items))
}
