//! AdamW over flat parameter vectors, for the network-style models.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p -= lr · weight_decay · p`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamW {
    pub fn new(len: usize, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dims(format!(
                "optimiser holds {} moments for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        ensure_finite(grads, "parameter gradient")?;
        let c = self.cfg;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - c.beta1.powi(t);
        let c2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (c.weight_decay * *p + (*m / c1) / ((*v / c2).sqrt() + c.eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, AdamWConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &g).unwrap();
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
        assert!(opt.update(&mut x, &[f64::NAN, 0.0]).is_err());
        assert!(opt.update(&mut x, &[0.0]).is_err());
    }

    #[test]
    fn first_step_closed_form() {
        let mut x = vec![1.0];
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        AdamW::new(1, cfg).update(&mut x, &[4.0]).unwrap();
        let expect = 1.0 - 0.1 * (0.5 * 1.0 + 4.0 / (4.0 + 1e-8));
        assert!((x[0] - expect).abs() < 1e-15);
    }
}
