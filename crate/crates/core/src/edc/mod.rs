//! Fixed-budget conversion of a pretrained cloud: farthest-point initialisation,
//! photometric optimisation with Adam, and densification that never exceeds
//! the budget.

mod adam;
mod densify;
mod fps;

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, LearningRates, OptimizerState, Origin};
pub use densify::{densify_and_prune, DensifyOutcome, CLONE_OFFSET, SPLIT_OFFSET, SPLIT_SCALE_DIVISOR};
pub use fps::{farthest_gaussian_indices, farthest_gaussian_sample};

use crate::error::{Error, Result};
use crate::features::{ConvPyramid, FeatureExtractor, NullExtractor};
use crate::gaussian::{layout, logit, GaussianCloud, MIN_OPACITY};
use crate::raster::{render, render_backward, ParamGradients};
use crate::view::{render_objective, RenderLossWeights, TrainingView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EDCConfig {
    /// Gaussian budget; a perfect cube when the result is voxelised.
    pub n_max: usize,
    pub max_iters: usize,
    /// Share of the budget kept by farthest-point initialisation.
    pub sample_fraction: f64,
    /// Averaged NDC positional-gradient norm that marks a Gaussian for densification.
    pub grad_threshold: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub scale_threshold: f64,
    pub opacity_prune: f64,
    /// Prune above this fraction of the scene extent.
    pub too_large_limit: f64,
    pub refine_interval: usize,
    /// No refinement after this iteration; 0 refines until the end.
    pub refine_until: usize,
    /// Reference length for the scale thresholds and the position step size.
    /// Non-positive means [`camera_extent`] of the training views.
    pub scene_extent: f64,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub depth_weight: f64,
    pub normal_weight: f64,
    /// Add the feature-pyramid term to the pixel L1.
    pub perceptual: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for EDCConfig {
    fn default() -> Self {
        Self {
            n_max: 512,
            max_iters: 3000,
            sample_fraction: 0.8,
            grad_threshold: 2e-4,
            scale_threshold: 0.01,
            opacity_prune: 0.005,
            too_large_limit: 0.1,
            refine_interval: 100,
            refine_until: 0,
            scene_extent: 0.0,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            depth_weight: 0.0,
            normal_weight: 0.0,
            perceptual: true,
            plateau_window: 100,
            plateau_tol: 1e-5,
        }
    }
}

impl EDCConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.grad_threshold,
            self.scale_threshold,
            self.opacity_prune,
            self.too_large_limit,
            self.plateau_tol,
        ];
        if self.n_max == 0 {
            return Err(Error::invalid("n_max must be positive"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::invalid("sample_fraction must lie in (0, 1]"));
        }
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("thresholds must be positive and finite"));
        }
        if self.refine_interval == 0 {
            return Err(Error::invalid("refine_interval must be at least 1"));
        }
        if ![self.depth_weight, self.normal_weight, self.scene_extent].iter().all(|v| v.is_finite())
            || self.depth_weight < 0.0
            || self.normal_weight < 0.0
        {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        self.lr.validate()?;
        self.adam.validate()
    }

    fn is_refinement(&self, iter: usize) -> bool {
        iter.is_multiple_of(self.refine_interval) && (self.refine_until == 0 || iter <= self.refine_until)
    }
}

/// One row of the training log. Row 0 describes the initialised cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub count: usize,
    pub delta_n: usize,
    pub pruned: usize,
    pub split: usize,
    pub cloned: usize,
}

pub const LOG_HEADER: &str = "iter,loss,count,delta_n,pruned,split,cloned";

pub fn write_log(rows: &[LogRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.9e},{},{},{},{},{}",
            r.iter, r.loss, r.count, r.delta_n, r.pruned, r.split, r.cloned
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub cloud: GaussianCloud,
    pub log: Vec<LogRow>,
    /// Count right after initialisation.
    pub initial_count: usize,
    /// Last optimisation iteration that ran.
    pub iterations: usize,
    pub plateaued: bool,
    /// Gaussians added by the final padding step.
    pub padded: usize,
}

/// Initial cloud: everything if it fits, otherwise a farthest-point subset
/// of `⌊sample_fraction · n_max⌋`.
pub fn initialize(pretrained: &GaussianCloud, cfg: &EDCConfig) -> Result<GaussianCloud> {
    if pretrained.len() <= cfg.n_max {
        return Ok(pretrained.clone());
    }
    let k = ((cfg.sample_fraction * cfg.n_max as f64).floor() as usize).max(1);
    farthest_gaussian_sample(pretrained, k)
}

/// Append near-transparent copies of the most opaque Gaussians until the
/// cloud holds exactly `n_max`.
pub fn pad_to_budget(cloud: &mut GaussianCloud, n_max: usize) -> Result<usize> {
    let missing = n_max.saturating_sub(cloud.len());
    if missing == 0 {
        return Ok(0);
    }
    if cloud.is_empty() {
        return Err(Error::invalid("cannot pad an empty cloud"));
    }
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| {
        cloud.gaussians[b]
            .opacity_logit
            .total_cmp(&cloud.gaussians[a].opacity_logit)
            .then(a.cmp(&b))
    });
    let faint = logit(MIN_OPACITY);
    let extra: Vec<_> = order
        .iter()
        .cycle()
        .take(missing)
        .map(|&i| {
            let mut g = cloud.gaussians[i];
            g.opacity_logit = faint;
            g
        })
        .collect();
    cloud.gaussians.extend(extra);
    Ok(missing)
}

/// 1.1 times the largest distance from a camera centre to their centroid,
/// floored at 1 so a single view still gives a usable scale.
pub fn camera_extent(views: &[TrainingView]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    (1.1 * radius).max(1.0)
}

/// Running densification statistics between refinement steps.
struct DensifyStats {
    norm_sum: Vec<f64>,
    pos_sum: Vec<Vector3<f64>>,
    seen: Vec<u32>,
}

impl DensifyStats {
    fn new(n: usize) -> Self {
        Self {
            norm_sum: vec![0.0; n],
            pos_sum: vec![Vector3::zeros(); n],
            seen: vec![0; n],
        }
    }

    fn add(&mut self, g: &ParamGradients) {
        for i in 0..g.len() {
            if g.visible[i] {
                self.norm_sum[i] += g.pos_grad_norm[i];
                self.pos_sum[i] += g.position(i);
                self.seen[i] += 1;
            }
        }
    }

    /// Mean gradient norm over the iterations in which each Gaussian was seen.
    fn averaged(&self) -> ParamGradients {
        let mut p = ParamGradients::zeros(self.seen.len());
        for i in 0..self.seen.len() {
            if self.seen[i] > 0 {
                p.pos_grad_norm[i] = self.norm_sum[i] / self.seen[i] as f64;
                p.raw[i][layout::POSITION].copy_from_slice(self.pos_sum[i].as_slice());
                p.visible[i] = true;
            }
        }
        p
    }
}

fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&losses[n - window..]);
    let before = mean(&losses[n - 2 * window..n - window]);
    (before - recent).abs() <= tol * before.abs().max(f64::MIN_POSITIVE)
}

/// Optimise `pretrained` against `views` under the budget and return exactly
/// `n_max` Gaussians.
pub fn fit_fixed_count(pretrained: &GaussianCloud, views: &[TrainingView], cfg: &EDCConfig) -> Result<FitResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("fit needs at least one view"));
    }
    if pretrained.is_empty() {
        return Err(Error::invalid("pretrained cloud is empty"));
    }
    pretrained.validate()?;
    for v in views {
        v.validate()?;
    }
    let extent = if cfg.scene_extent > 0.0 { cfg.scene_extent } else { camera_extent(views) };
    let run_cfg = EDCConfig {
        scene_extent: extent,
        ..cfg.clone()
    };
    let weights = RenderLossWeights {
        image: 1.0,
        depth: cfg.depth_weight,
        normal: cfg.normal_weight,
        unmasked: false,
    };
    let pyramid = ConvPyramid::default();
    let extractor: &dyn FeatureExtractor = if cfg.perceptual { &pyramid } else { &NullExtractor };

    let mut cloud = initialize(pretrained, cfg)?;
    let initial_count = cloud.len();
    let mut state = OptimizerState::new(cloud.len());
    let mut stats = DensifyStats::new(cloud.len());
    let mut log = Vec::with_capacity(cfg.max_iters + 1);
    let mut losses = Vec::with_capacity(cfg.max_iters);

    let (first, _) = render_objective(&render(&cloud, &views[0].camera), &views[0], extractor, &weights)?;
    log.push(LogRow {
        iter: 0,
        loss: first.weighted(&weights),
        count: cloud.len(),
        delta_n: 0,
        pruned: 0,
        split: 0,
        cloned: 0,
    });

    let mut iterations = 0;
    let mut stopped = false;
    for iter in 1..=cfg.max_iters {
        let view = &views[(iter - 1) % views.len()];
        let out = render(&cloud, &view.camera);
        let (terms, upstream) = render_objective(&out, view, extractor, &weights)?;
        let loss = terms.weighted(&weights);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        let grads = render_backward(&cloud, &view.camera, &upstream)?;
        let lr = cfg.lr.per_channel(cfg.lr.position_at(iter, cfg.max_iters) * extent);
        adam_step(&mut cloud, &grads.raw, &mut state, &lr, &cfg.adam)?;
        stats.add(&grads);

        let mut row = LogRow {
            iter,
            loss,
            count: cloud.len(),
            delta_n: 0,
            pruned: 0,
            split: 0,
            cloned: 0,
        };
        if cfg.is_refinement(iter) {
            let outcome = densify_and_prune(&cloud, &stats.averaged(), &run_cfg, iter);
            state.remap(&outcome.origin);
            cloud = outcome.cloud;
            stats = DensifyStats::new(cloud.len());
            row.count = cloud.len();
            row.delta_n = outcome.delta_n;
            row.pruned = outcome.pruned;
            row.split = outcome.split;
            row.cloned = outcome.cloned;
            if cloud.is_empty() {
                return Err(Error::NonFinite(format!("every gaussian was pruned at iteration {iter}")));
            }
        }
        assert!(cloud.len() <= cfg.n_max, "budget exceeded at iteration {iter}");
        log.push(row);
        losses.push(loss);
        iterations = iter;
        if plateaued(&losses, cfg.plateau_window, cfg.plateau_tol) {
            stopped = true;
            break;
        }
    }
    let padded = pad_to_budget(&mut cloud, cfg.n_max)?;
    Ok(FitResult {
        cloud,
        log,
        initial_count,
        iterations,
        plateaued: stopped,
        padded,
    })
}
