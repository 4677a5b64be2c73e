//! A two-layer perceptron embedding provider and a synthetic two-stage
//! alignment run on top of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{retrieval_topk, stage1_loss_grad, stage2_loss_grad, ContrastConfig, EmbeddingBatch, Modality};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

/// `y = W2 tanh(W1 x + b1) + b2` on row-major batches. Parameters are one
/// flat vector `[W1, b1, W2, b2]` with weights stored output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

/// Flat gradient with the same layout as [`Mlp::params`].
pub type MlpGrads = Vec<f64>;

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let mut params = Vec::with_capacity(hidden * input + hidden + output * hidden + output);
        params.extend((0..hidden * input).map(|_| n1.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend((0..output * hidden).map(|_| n2.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, output));
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.output * self.hidden);
        (w1, b1, w2, b2)
    }

    fn rows(&self, x: &[f64]) -> Result<usize> {
        if !x.len().is_multiple_of(self.input) {
            return Err(Error::dims(format!("{} inputs do not form rows of {}", x.len(), self.input)));
        }
        Ok(x.len() / self.input)
    }

    /// Outputs and hidden activations.
    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.rows(x)?;
        let (w1, b1, w2, b2) = self.split();
        let mut h = vec![0.0; n * self.hidden];
        let mut y = vec![0.0; n * self.output];
        for r in 0..n {
            let xr = &x[r * self.input..(r + 1) * self.input];
            for j in 0..self.hidden {
                let z: f64 = b1[j] + w1[j * self.input..(j + 1) * self.input].iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                h[r * self.hidden + j] = z.tanh();
            }
            let hr = &h[r * self.hidden..(r + 1) * self.hidden];
            for o in 0..self.output {
                y[r * self.output + o] =
                    b2[o] + w2[o * self.hidden..(o + 1) * self.hidden].iter().zip(hr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok((y, h))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Parameter gradient of `Σ g_out · forward(x)`.
    pub fn backward(&self, x: &[f64], g_out: &[f64]) -> Result<MlpGrads> {
        let n = self.rows(x)?;
        if g_out.len() != n * self.output {
            return Err(Error::dims("output gradient does not match the batch"));
        }
        let (_, h) = self.forward_cached(x)?;
        let (_, _, w2, _) = self.split();
        let (i_n, h_n, o_n) = (self.input, self.hidden, self.output);
        let mut g = vec![0.0; self.params.len()];
        let (gw1, rest) = g.split_at_mut(h_n * i_n);
        let (gb1, rest) = rest.split_at_mut(h_n);
        let (gw2, gb2) = rest.split_at_mut(o_n * h_n);
        for r in 0..n {
            let xr = &x[r * i_n..(r + 1) * i_n];
            let hr = &h[r * h_n..(r + 1) * h_n];
            let gy = &g_out[r * o_n..(r + 1) * o_n];
            let mut gh = vec![0.0; h_n];
            for o in 0..o_n {
                gb2[o] += gy[o];
                for j in 0..h_n {
                    gw2[o * h_n + j] += gy[o] * hr[j];
                    gh[j] += gy[o] * w2[o * h_n + j];
                }
            }
            for j in 0..h_n {
                let gz = gh[j] * (1.0 - hr[j] * hr[j]);
                gb1[j] += gz;
                for k in 0..i_n {
                    gw1[j * i_n + k] += gz * xr[k];
                }
            }
        }
        Ok(g)
    }

    pub fn embed(&self, modality: Modality, x: &[f64]) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(modality, self.output, self.forward(x)?)
    }
}

/// Latent shape codes observed through fixed random maps: point and sketch
/// features feed trainable encoders, image and text embeddings stand in for
/// a frozen pretrained space. Sketches are noisier than points.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShapes {
    pub count: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub points: Vec<f64>,
    pub sketches: Vec<f64>,
    pub images: EmbeddingBatch,
    pub texts: EmbeddingBatch,
}

impl SyntheticShapes {
    pub fn generate(count: usize, seed: u64) -> Result<Self> {
        const LATENT: usize = 6;
        const FEATURES: usize = 12;
        const EMBED: usize = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let mut draw = |n: usize, s: f64| (0..n).map(|_| s * unit.sample(&mut rng)).collect::<Vec<f64>>();
        let z = draw(count * LATENT, 1.0);
        let map_p = draw(FEATURES * LATENT, 1.0);
        let map_s = draw(FEATURES * LATENT, 1.0);
        let map_i = draw(EMBED * LATENT, 1.0);
        let map_t = draw(EMBED * LATENT, 1.0);
        let noise_p = draw(count * FEATURES, 0.05);
        let noise_s = draw(count * FEATURES, 0.3);
        let noise_t = draw(count * EMBED, 0.2);
        let project = |m: &[f64], rows: usize, noise: Option<&[f64]>| {
            let mut out = vec![0.0; count * rows];
            for c in 0..count {
                for r in 0..rows {
                    let v: f64 = (0..LATENT).map(|k| m[r * LATENT + k] * z[c * LATENT + k]).sum();
                    out[c * rows + r] = v + noise.map_or(0.0, |n| n[c * rows + r]);
                }
            }
            out
        };
        Ok(Self {
            count,
            feature_dim: FEATURES,
            embed_dim: EMBED,
            points: project(&map_p, FEATURES, Some(&noise_p)),
            sketches: project(&map_s, FEATURES, Some(&noise_s)),
            images: EmbeddingBatch::new(Modality::I, EMBED, project(&map_i, EMBED, None))?,
            texts: EmbeddingBatch::new(Modality::T, EMBED, project(&map_t, EMBED, Some(&noise_t)))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub stage1_first: f64,
    pub stage1_last: f64,
    pub stage2_first: f64,
    pub stage2_last: f64,
    /// Sketch → shape top-1 before and after the second stage.
    pub top1_before: f64,
    pub top1_after: f64,
}

/// Stage 1 trains the point encoder against the frozen image/text space;
/// stage 2 starts a sketch encoder from it and trains both on the sketch
/// objective. Full-batch AdamW throughout.
pub fn finetune_demo(data: &SyntheticShapes, cfg: &ContrastConfig, steps: usize, seed: u64) -> Result<FinetuneReport> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::invalid("finetune needs at least one step"));
    }
    let opt_cfg = AdamWConfig {
        lr: 1e-2,
        ..AdamWConfig::default()
    };
    let mut point = Mlp::new(data.feature_dim, 32, data.embed_dim, seed);
    let mut opt = AdamW::new(point.params.len(), opt_cfg);
    let (mut s1_first, mut s1_last) = (0.0, 0.0);
    for step in 0..steps {
        let p = point.embed(Modality::P, &data.points)?;
        let l = stage1_loss_grad(&p, &data.texts, &data.images, cfg.temperature)?;
        if step == 0 {
            s1_first = l.value;
        }
        s1_last = l.value;
        let g = point.backward(&data.points, &l.grads[0])?;
        opt.update(&mut point.params, &g)?;
    }

    let mut sketch = point.clone();
    let top1 = |sk: &Mlp, pt: &Mlp| -> Result<f64> {
        let q = sk.embed(Modality::S, &data.sketches)?;
        let g = pt.embed(Modality::P, &data.points)?;
        Ok(retrieval_topk(&q, &g, &[1])?[0])
    };
    let top1_before = top1(&sketch, &point)?;
    let mut opt_s = AdamW::new(sketch.params.len(), opt_cfg);
    let mut opt_p = AdamW::new(point.params.len(), opt_cfg);
    let (mut s2_first, mut s2_last) = (0.0, 0.0);
    for step in 0..steps {
        let s = sketch.embed(Modality::S, &data.sketches)?;
        let p = point.embed(Modality::P, &data.points)?;
        let l = stage2_loss_grad(&s, &p, &data.images, cfg)?;
        if step == 0 {
            s2_first = l.value;
        }
        s2_last = l.value;
        let gs = sketch.backward(&data.sketches, &l.grads[0])?;
        let gp = point.backward(&data.points, &l.grads[1])?;
        opt_s.update(&mut sketch.params, &gs)?;
        opt_p.update(&mut point.params, &gp)?;
    }
    Ok(FinetuneReport {
        stage1_first: s1_first,
        stage1_last: s1_last,
        stage2_first: s2_first,
        stage2_last: s2_last,
        top1_before,
        top1_after: top1(&sketch, &point)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    #[test]
    fn mlp_backward_matches_differences() {
        let mlp = Mlp::new(4, 5, 3, 9);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let g_out: Vec<f64> = (0..6).map(|i| (i as f64 * 0.71).cos()).collect();
        let g = mlp.backward(&x, &g_out).unwrap();
        let f = |p: &[f64]| {
            let m = Mlp { params: p.to_vec(), ..mlp.clone() };
            m.forward(&x).unwrap().iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>()
        };
        for (a, n) in g.iter().zip(central_difference(f, &mlp.params, 1e-6)) {
            assert!(relative_error(*a, n, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn two_stage_run_improves() {
        let data = SyntheticShapes::generate(24, 5).unwrap();
        let cfg = ContrastConfig { temperature: 0.1, margin: 0.2 };
        let r = finetune_demo(&data, &cfg, 150, 1).unwrap();
        assert!(r.stage1_last < 0.5 * r.stage1_first, "{r:?}");
        assert!(r.stage2_last < r.stage2_first, "{r:?}");
        assert!(r.top1_after >= r.top1_before && r.top1_after > 0.5, "{r:?}");
    }
}
