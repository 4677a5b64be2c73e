use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::image::{load_pfm, load_ppm};
use super::{read_bytes, write_bytes};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::view::TrainingView;

/// One camera with its image paths, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub world_to_camera: [[f64; 4]; 4],
    pub color: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<PathBuf>,
}

impl ManifestView {
    pub fn from_camera(cam: &Camera, color: PathBuf, depth: Option<PathBuf>, normal: Option<PathBuf>) -> Self {
        let m = cam.world_to_camera();
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            color,
            depth,
            normal,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let m = Matrix4::from_fn(|r, c| self.world_to_camera[r][c]);
        Camera::from_world_to_camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, &m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub views: Vec<ManifestView>,
    /// Scene box `[lo, hi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[[f64; 3]; 2]>,
}

impl SceneManifest {
    /// Checks camera validity; file existence is checked by [`load_manifest`].
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("manifest lists no views"));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.camera()
                .map_err(|e| Error::invalid(format!("view {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.views.iter().map(ManifestView::camera).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                Some(field) => Error::MissingField(field.to_string()),
                None => Error::Json(e),
            }
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is always serialisable") + "\n"
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

/// Parse, validate, and check that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(format!("{}: not UTF-8", path.display())))?;
    let m = SceneManifest::from_json(text)?;
    let base = manifest_dir(path);
    for v in &m.views {
        for p in std::iter::once(&v.color).chain(v.depth.iter()).chain(v.normal.iter()) {
            let full = resolve(base, p);
            if !full.is_file() {
                return Err(Error::file(
                    full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by the manifest but missing"),
                ));
            }
        }
    }
    Ok(m)
}

pub fn save_manifest(path: &Path, m: &SceneManifest) -> Result<()> {
    write_bytes(path, m.to_json().as_bytes())
}

/// Ground-truth views for a manifest at `path`.
pub fn load_views(path: &Path, m: &SceneManifest) -> Result<Vec<TrainingView>> {
    let base = manifest_dir(path);
    m.views
        .iter()
        .map(|v| {
            let camera = v.camera()?;
            let color = load_ppm(&resolve(base, &v.color))?;
            let depth = v.depth.as_ref().map(|p| load_pfm(&resolve(base, p))).transpose()?;
            let normal = v.normal.as_ref().map(|p| load_pfm(&resolve(base, p))).transpose()?;
            if color.width != v.width || color.height != v.height {
                return Err(Error::dims(format!(
                    "{}: image is {}x{}, camera is {}x{}",
                    v.color.display(),
                    color.width,
                    color.height,
                    v.width,
                    v.height
                )));
            }
            if depth.as_ref().is_some_and(|d| d.channels != 1) || normal.as_ref().is_some_and(|n| n.channels != 3) {
                return Err(Error::format("depth maps need one channel and normal maps three"));
            }
            let view = TrainingView {
                camera,
                color: color.to_f64(),
                depth: depth.map(|d| d.to_f64()),
                normal: normal.map(|n| n.to_f64()),
                alpha: None,
            };
            view.validate()?;
            Ok(view)
        })
        .collect()
}
