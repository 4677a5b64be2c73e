use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RefineWeights;
use crate::optim::AdamWConfig;

/// Below this ᾱ_t the clean-sample estimate divides by almost zero.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weights: RefineWeights,
    /// Share of `max_iters` trained on the diffusion loss alone.
    pub warmup_fraction: f64,
    pub max_iters: usize,
    pub ema_decay: f64,
    pub optimizer: AdamWConfig,
    /// Add the feature-pyramid term to the image loss.
    pub perceptual: bool,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            weights: RefineWeights::default(),
            warmup_fraction: 0.4,
            max_iters: 500,
            ema_decay: 0.999,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            perceptual: true,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(Error::invalid("diffusion needs at least two timesteps"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta schedule must satisfy 0 < start < end < 1, got {}..{}",
                self.beta_start, self.beta_end
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1]"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.weights.validate()
    }

    pub fn betas(&self) -> Vec<f64> {
        let t = self.timesteps;
        (0..t)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    }

    /// First iteration (0-based) that adds the rendering terms.
    pub fn refine_start(&self) -> usize {
        (self.warmup_fraction * self.max_iters as f64).ceil() as usize
    }
}

/// Noise schedule indexed by timestep `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), with ᾱ_0 = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.index(t)?;
        let prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        let ab = self.alpha_bars[i];
        if 1.0 - ab <= 0.0 {
            return Ok(0.0);
        }
        Ok(self.betas[i] * (1.0 - prev) / (1.0 - ab))
    }
}

/// `ᾱ_t = Π_{s≤t} (1 − β_s)` for explicit `betas` in `[0, 1)`.
pub fn schedule_from_betas(betas: Vec<f64>) -> Result<Schedule> {
    if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
        return Err(Error::invalid("betas must be non-empty and lie in [0, 1)"));
    }
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(Schedule { betas, alpha_bars })
}

pub fn make_schedule(cfg: &DiffusionConfig) -> Result<Schedule> {
    cfg.validate()?;
    schedule_from_betas(cfg.betas())
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], s: &Schedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::dims("q_sample: clean sample and noise differ in length"));
    }
    let ab = s.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `x̂0 = (x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], s: &Schedule) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() {
        return Err(Error::dims("predict_x0: sample and noise estimate differ in length"));
    }
    let ab = s.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::NonFinite(format!("alpha_bar {ab:e} at t = {t} is too small to invert")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// `∂x̂0/∂ε̂`, the same for every element.
pub fn predict_x0_noise_jacobian(t: usize, s: &Schedule) -> Result<f64> {
    let ab = s.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::NonFinite(format!("alpha_bar {ab:e} at t = {t} is too small to invert")));
    }
    Ok(-(1.0 - ab).sqrt() / ab.sqrt())
}

/// Mean squared error between the true and predicted noise.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::dims("diffusion_loss: noise tensors differ in length or are empty"));
    }
    Ok(eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.len() as f64)
}

/// Exponential moving average of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f64>,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
}
