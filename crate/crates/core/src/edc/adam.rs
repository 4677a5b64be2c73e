use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::{layout, normalize_quat, Gaussian, GaussianCloud, CHANNELS};

/// Per-group step sizes. Position rates are in scene units and get scaled by
/// the scene extent inside the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate reached at the last iteration (log-linear decay).
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-3,
            position_final: 1.6e-5,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.position, self.position_final, self.scale, self.rotation, self.opacity, self.color];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        Ok(())
    }

    /// Position rate at `iter` of `total`, interpolated in log space.
    pub fn position_at(&self, iter: usize, total: usize) -> f64 {
        if total == 0 || self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position;
        }
        let t = (iter as f64 / total as f64).clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }

    /// Step size for every raw channel, with `position` substituted for the
    /// position group.
    pub fn per_channel(&self, position: f64) -> [f64; CHANNELS] {
        let mut lr = [0.0; CHANNELS];
        lr[layout::POSITION].fill(position);
        lr[layout::SCALE].fill(self.scale);
        lr[layout::ROTATION].fill(self.rotation);
        lr[layout::OPACITY] = self.opacity;
        lr[layout::COLOR].fill(self.color);
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Adam moments, one row per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<[f64; CHANNELS]>,
    pub v: Vec<[f64; CHANNELS]>,
    pub step: u64,
}

/// Where a row of a rebuilt cloud came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    New,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; CHANNELS]; n],
            v: vec![[0.0; CHANNELS]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Reorder rows to follow a rebuilt cloud. New rows start at zero.
    pub fn remap(&mut self, origin: &[Origin]) {
        let pick = |src: &[[f64; CHANNELS]]| {
            origin
                .iter()
                .map(|o| match o {
                    Origin::Kept(i) => src[*i],
                    Origin::New => [0.0; CHANNELS],
                })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// One bias-corrected Adam update of every raw parameter. Quaternions are
/// renormalised and colours clamped to [0, 1] afterwards.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    grads: &[[f64; CHANNELS]],
    state: &mut OptimizerState,
    lr: &[f64; CHANNELS],
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != cloud.len() || state.len() != cloud.len() {
        return Err(Error::dims(format!(
            "adam: {} gaussians, {} gradients, {} moment rows",
            cloud.len(),
            grads.len(),
            state.len()
        )));
    }
    ensure_finite(grads.as_flattened(), "adam gradient")?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((g, grad), m), v) in cloud.gaussians.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let mut raw = g.to_raw();
        for k in 0..CHANNELS {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            raw[k] -= lr[k] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        let before = g.rotation;
        *g = Gaussian::from_raw(&raw);
        if g.rotation != before {
            g.rotation = normalize_quat(&g.rotation);
        }
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    }
    Ok(())
}
