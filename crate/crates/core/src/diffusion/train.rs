//! Joint diffusion and rendering training, and ancestral sampling.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::perceiver::{ConditionBundle, Perceiver, QUERIES};
use super::predictor::{NoisePredictor, TrainablePredictor};
use super::schedule::{
    diffusion_loss, make_schedule, predict_x0, predict_x0_noise_jacobian, q_sample, DiffusionConfig, Ema, Schedule,
};
use crate::error::{ensure_finite, Error, Result};
use crate::exec;
use crate::features::{ConvPyramid, FeatureExtractor, NullExtractor};
use crate::gaussian::{unflatten_clamped, unflatten_clamped_vjp, Features14, GaussianCloud, CHANNELS};
use crate::losses::total_refine_loss;
use crate::optim::AdamW;
use crate::raster::{render, render_backward};
use crate::view::{render_objective, RenderLossWeights, TrainingView};
use crate::voxel::{Bounds, VoxelGrid};

/// Floor on per-channel standard deviations; constant channels map to zero.
pub const STD_FLOOR: f64 = 1e-3;

/// Per-channel affine standardisation of grid features.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a VoxelGrid>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        for g in grids {
            for cell in g.features.chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    sum[c] += cell[c];
                    sq[c] += cell[c] * cell[c];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a normaliser to no cells"));
        }
        let mut out = Self::identity();
        for c in 0..CHANNELS {
            let m = sum[c] / count as f64;
            out.mean[c] = m;
            out.std[c] = (sq[c] / count as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR);
        }
        Ok(out)
    }

    pub fn normalize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % CHANNELS]) / self.std[i % CHANNELS])
            .collect()
    }

    pub fn denormalize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % CHANNELS] + self.mean[i % CHANNELS])
            .collect()
    }
}

/// One training object: its grid, condition and ground-truth views.
#[derive(Debug, Clone)]
pub struct DiffusionItem {
    pub grid: VoxelGrid,
    pub condition: ConditionBundle,
    pub views: Vec<TrainingView>,
}

/// Perceiver and noise predictor trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel<P> {
    pub perceiver: Perceiver,
    pub predictor: P,
}

impl<P: TrainablePredictor> DiffusionModel<P> {
    /// `[perceiver, predictor]` parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.perceiver.params.values.clone();
        v.extend_from_slice(self.predictor.params());
        v
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let np = self.perceiver.params.len();
        if values.len() != np + self.predictor.params().len() {
            return Err(Error::dims("parameter vector does not match the model"));
        }
        self.perceiver.params = self.perceiver.params.with_values(values[..np].to_vec())?;
        self.predictor.set_params(&values[np..])
    }

    pub fn fused(&self, condition: &ConditionBundle) -> Result<DMatrix<f64>> {
        condition.fused(&self.perceiver)
    }
}

/// Losses of one step, averaged over the batch. Rendering terms are `None`
/// during warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub iter: usize,
    pub diffusion: f64,
    pub image: Option<f64>,
    pub depth: Option<f64>,
    pub normal: Option<f64>,
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,L_diff,L_img,L_depth,L_normal,total";

pub fn write_log(rows: &[StepLosses], mut w: impl Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.9e},{},{},{},{:.9e}",
            r.iter,
            r.diffusion,
            opt(r.image),
            opt(r.depth),
            opt(r.normal),
            r.total
        )?;
    }
    Ok(())
}

/// Independent stream per (seed, iteration, batch slot).
fn item_rng(seed: u64, iter: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iter as u64) << 20) | slot as u64);
    rng
}

fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Decode a feature grid cell by cell, in cell order.
fn decode_cells(features: &[f64]) -> Result<(Vec<Features14>, GaussianCloud)> {
    let mut cells = Vec::with_capacity(features.len() / CHANNELS);
    let mut gaussians = Vec::with_capacity(cells.capacity());
    for chunk in features.chunks_exact(CHANNELS) {
        let mut f = [0.0; CHANNELS];
        f.copy_from_slice(chunk);
        let f = Features14(f);
        gaussians.push(unflatten_clamped(&f)?);
        cells.push(f);
    }
    Ok((cells, GaussianCloud::new(gaussians)))
}

struct ItemResult {
    diffusion: f64,
    image: Option<f64>,
    depth: Option<f64>,
    normal: Option<f64>,
    grads: Vec<f64>,
}

pub struct Trainer<P> {
    pub model: DiffusionModel<P>,
    pub opt: AdamW,
    pub ema: Ema,
    pub schedule: Schedule,
    pub cfg: DiffusionConfig,
    pub normalizer: Normalizer,
    extractor: Box<dyn FeatureExtractor>,
}

impl<P: TrainablePredictor> Trainer<P> {
    pub fn new(model: DiffusionModel<P>, cfg: DiffusionConfig, normalizer: Normalizer) -> Result<Self> {
        let schedule = make_schedule(&cfg)?;
        let params = model.params();
        let extractor: Box<dyn FeatureExtractor> = if cfg.perceptual {
            Box::new(ConvPyramid::default())
        } else {
            Box::new(NullExtractor)
        };
        Ok(Self {
            opt: AdamW::new(params.len(), cfg.optimizer),
            ema: Ema::new(&params, cfg.ema_decay),
            model,
            schedule,
            cfg,
            normalizer,
            extractor,
        })
    }

    /// Model carrying the averaged weights.
    pub fn ema_model(&self) -> Result<DiffusionModel<P>>
    where
        P: Clone,
    {
        let mut m = self.model.clone();
        m.set_params(&self.ema.shadow)?;
        Ok(m)
    }

    pub fn is_refining(&self, iter: usize) -> bool {
        iter >= self.cfg.refine_start()
    }

    fn item(&self, item: &DiffusionItem, slot: usize, iter: usize, batch: usize) -> Result<ItemResult> {
        let model = &self.model;
        let w = &self.cfg.weights;
        let n = item.grid.n;
        let mut rng = item_rng(self.cfg.seed, iter, slot);
        let t = rng.random_range(1..=self.schedule.steps());
        let x0 = self.normalizer.normalize(&item.grid.features);
        let eps = normal_vec(&mut rng, x0.len());
        let x_t = q_sample(&x0, t, &eps, &self.schedule)?;
        let fused = model.fused(&item.condition)?;
        let eps_hat = model.predictor.predict(&x_t, n, t, &fused)?;
        let diffusion = diffusion_loss(&eps, &eps_hat)?;
        let scale = 1.0 / batch as f64;
        let mut g_eps: Vec<f64> = eps_hat
            .iter()
            .zip(&eps)
            .map(|(a, b)| w.diffusion * 2.0 * (a - b) / x0.len() as f64 * scale)
            .collect();

        let (mut image, mut depth, mut normal) = (None, None, None);
        if self.is_refining(iter) {
            if item.views.is_empty() {
                return Err(Error::invalid("refinement needs at least one view per object"));
            }
            let view = &item.views[rng.random_range(0..item.views.len())];
            let x0_hat = predict_x0(&x_t, t, &eps_hat, &self.schedule)?;
            let (cells, cloud) = decode_cells(&self.normalizer.denormalize(&x0_hat))?;
            let out = render(&cloud, &view.camera);
            let rw = RenderLossWeights {
                image: w.image,
                depth: w.depth,
                normal: w.normal,
                unmasked: false,
            };
            let (losses, upstream) = render_objective(&out, view, self.extractor.as_ref(), &rw)?;
            let pg = render_backward(&cloud, &view.camera, &upstream)?;
            let jac = predict_x0_noise_jacobian(t, &self.schedule)? * scale;
            for (k, f) in cells.iter().enumerate() {
                let gf = unflatten_clamped_vjp(f, &cloud.gaussians[k], &pg.raw[k]);
                for c in 0..CHANNELS {
                    g_eps[k * CHANNELS + c] += jac * gf[c] * self.normalizer.std[c];
                }
            }
            image = Some(losses.image);
            depth = losses.depth;
            normal = losses.normal;
        }

        let (g_pred, g_fused) = model.predictor.backward(&x_t, n, t, &fused, &g_eps)?;
        let g_reduced = g_fused.rows(0, QUERIES).into_owned();
        let (g_perc, _) = model.perceiver.backward(&item.condition.sketch_tokens, &g_reduced)?;
        let mut grads = g_perc;
        grads.extend(g_pred);
        Ok(ItemResult {
            diffusion,
            image,
            depth,
            normal,
            grads,
        })
    }

    /// One optimiser step over `batch`. `iter` is zero-based.
    pub fn train_step(&mut self, batch: &[DiffusionItem], iter: usize) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let results = exec::map_range(batch.len(), |i| self.item(&batch[i], i, iter, batch.len()));
        let mut grads = vec![0.0; self.opt.m.len()];
        let b = batch.len() as f64;
        let mut diffusion = 0.0;
        let mut sums = [None::<f64>; 3];
        for r in results {
            let r = r?;
            diffusion += r.diffusion / b;
            for (s, v) in sums.iter_mut().zip([r.image, r.depth, r.normal]) {
                if let Some(v) = v {
                    *s = Some(s.unwrap_or(0.0) + v / b);
                }
            }
            for (g, v) in grads.iter_mut().zip(&r.grads) {
                *g += v;
            }
        }
        let [image, depth, normal] = sums;
        let w = &self.cfg.weights;
        let total = total_refine_loss(
            diffusion,
            image.unwrap_or(0.0),
            depth.unwrap_or(0.0),
            normal.unwrap_or(0.0),
            w,
        );
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {iter}: diffusion {diffusion}, image {image:?}, depth {depth:?}, normal {normal:?}"
            )));
        }
        ensure_finite(&grads, "diffusion gradient")?;
        let mut params = self.model.params();
        self.opt.update(&mut params, &grads)?;
        self.model.set_params(&params)?;
        self.ema.update(&params);
        Ok(StepLosses {
            iter,
            diffusion,
            image,
            depth,
            normal,
            total,
        })
    }

    /// `cfg.max_iters` full-batch steps.
    pub fn train(&mut self, items: &[DiffusionItem]) -> Result<Vec<StepLosses>> {
        (0..self.cfg.max_iters).map(|i| self.train_step(items, i)).collect()
    }
}

/// Ancestral sampling from pure noise with posterior variance `β̃_t`.
/// Returns denormalised features in cell order.
pub fn sample<P: NoisePredictor>(
    predictor: &P,
    fused: &DMatrix<f64>,
    n: usize,
    schedule: &Schedule,
    normalizer: &Normalizer,
    bounds: Bounds,
    seed: u64,
) -> Result<VoxelGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * n * n * CHANNELS;
    let mut x = normal_vec(&mut rng, len);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predictor.predict(&x, n, t, fused)?;
        let x0 = predict_x0(&x, t, &eps_hat, schedule)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = if t == 1 { 1.0 } else { schedule.alpha_bar(t - 1)? };
        let beta = schedule.beta(t)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = schedule.posterior_variance(t)?.sqrt();
        let noise = if t > 1 { normal_vec(&mut rng, len) } else { vec![0.0; len] };
        x = (0..len).map(|i| c0 * x0[i] + ct * x[i] + sigma * noise[i]).collect();
        ensure_finite(&x, "sampled grid")?;
    }
    VoxelGrid::from_features(n, bounds, normalizer.denormalize(&x))
}
