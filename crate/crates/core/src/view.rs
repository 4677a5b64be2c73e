//! Supervised views and the rendering objective shared by the trainers.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::losses::{depth_loss_grad, image_loss_grad, normal_loss_grad, Mask};
use crate::raster::{RenderGrads, RenderOutput};

/// A camera with ground-truth maps. Depth, normal and coverage are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub camera: Camera,
    pub color: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    pub normal: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
}

impl TrainingView {
    /// Ground truth taken from a render of a reference cloud.
    pub fn from_render(camera: Camera, out: &RenderOutput) -> Self {
        Self {
            camera,
            color: out.color.clone(),
            depth: Some(out.depth.clone()),
            normal: Some(out.normal.clone()),
            alpha: Some(out.alpha.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.camera.pixel_count();
        let bad = self.color.len() != 3 * n
            || self.depth.as_ref().is_some_and(|d| d.len() != n)
            || self.normal.as_ref().is_some_and(|d| d.len() != 3 * n)
            || self.alpha.as_ref().is_some_and(|d| d.len() != n);
        if bad {
            return Err(Error::dims(format!(
                "view maps do not match a {}x{} camera",
                self.camera.width, self.camera.height
            )));
        }
        Ok(())
    }

    /// Coverage mask for the geometry losses: ground-truth alpha above 0.5
    /// when available, otherwise positive depth.
    pub fn mask(&self) -> Mask {
        match (&self.alpha, &self.depth) {
            (Some(a), _) => Mask::from_alpha(a),
            (None, Some(d)) => Mask::from_depth(d),
            (None, None) => Mask::All,
        }
    }
}

/// Weights of the rendering terms. The diffusion term is handled by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderLossWeights {
    pub image: f64,
    pub depth: f64,
    pub normal: f64,
    /// Evaluate depth/normal losses on every pixel instead of covered ones.
    pub unmasked: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderLosses {
    pub image: f64,
    pub depth: Option<f64>,
    pub normal: Option<f64>,
}

impl RenderLosses {
    pub fn weighted(&self, w: &RenderLossWeights) -> f64 {
        w.image * self.image + w.depth * self.depth.unwrap_or(0.0) + w.normal * self.normal.unwrap_or(0.0)
    }
}

/// Image, depth and normal losses of `out` against `view`, with the gradient
/// of the weighted sum with respect to the rendered maps. Geometry terms with
/// zero weight or missing ground truth are skipped.
pub fn render_objective(
    out: &RenderOutput,
    view: &TrainingView,
    fx: &dyn FeatureExtractor,
    w: &RenderLossWeights,
) -> Result<(RenderLosses, RenderGrads)> {
    let (width, height) = (out.width, out.height);
    let mut grads = RenderGrads::zeros(width, height);
    let (image, g) = image_loss_grad(&out.color, &view.color, width, height, fx)?;
    for (d, s) in grads.color.iter_mut().zip(g) {
        *d = w.image * s;
    }
    let mask = if w.unmasked { Mask::All } else { view.mask() };
    let depth = match &view.depth {
        Some(gt) if w.depth > 0.0 => {
            let (l, g) = depth_loss_grad(&out.depth, gt, &mask)?;
            for (d, s) in grads.depth.iter_mut().zip(g) {
                *d = w.depth * s;
            }
            Some(l)
        }
        _ => None,
    };
    let normal = match &view.normal {
        Some(gt) if w.normal > 0.0 => {
            let (l, g) = normal_loss_grad(&out.normal, gt, &mask)?;
            for (d, s) in grads.normal.iter_mut().zip(g) {
                *d = w.normal * s;
            }
            Some(l)
        }
        _ => None,
    };
    Ok((RenderLosses { image, depth, normal }, grads))
}
