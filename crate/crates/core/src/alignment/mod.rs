//! Cross-modal alignment: symmetric InfoNCE, the sketch/shape triplet hinge,
//! the two training-stage objectives and retrieval evaluation.
//!
//! Losses are evaluated on L2-normalised rows; gradients are returned with
//! respect to the raw rows a batch was built from.

mod encoder;
mod retrieval;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use encoder::{finetune_demo, FinetuneReport, Mlp, MlpGrads, SyntheticShapes};
pub use retrieval::{retrieval_topk, true_rank};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Shape point cloud.
    P,
    /// Rendered image.
    I,
    /// Text.
    T,
    /// VR sketch.
    S,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::P => "P",
            Modality::I => "I",
            Modality::T => "T",
            Modality::S => "S",
        };
        f.write_str(s)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Modality::P),
            "I" => Ok(Modality::I),
            "T" => Ok(Modality::T),
            "S" => Ok(Modality::S),
            _ => Err(Error::invalid(format!("unknown modality `{s}`"))),
        }
    }
}

/// Row-major `N × dim` embeddings. `rows` are the unit-normalised copies of `raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub modality: Modality,
    pub dim: usize,
    pub raw: Vec<f64>,
    pub rows: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(modality: Modality, dim: usize, raw: Vec<f64>) -> Result<Self> {
        if dim == 0 || !raw.len().is_multiple_of(dim) {
            return Err(Error::dims(format!("{} values do not form rows of {dim}", raw.len())));
        }
        ensure_finite(&raw, "embedding")?;
        let mut rows = raw.clone();
        let mut norms = Vec::with_capacity(raw.len() / dim);
        for (i, r) in rows.chunks_mut(dim).enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::invalid(format!("embedding row {i} has zero norm")));
            }
            r.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Self {
            modality,
            dim,
            raw,
            rows,
            norms,
        })
    }

    /// Rows already checked to be unit length are kept verbatim, so a
    /// stored table reads back bit for bit.
    pub(crate) fn from_unit_rows(modality: Modality, dim: usize, rows: Vec<f64>) -> Result<Self> {
        let mut b = Self::new(modality, dim, rows)?;
        b.rows.clone_from(&b.raw);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Pull a gradient on the normalised rows back to the raw rows.
    pub fn normalize_vjp(&self, g_rows: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g_rows.len()];
        for i in 0..self.len() {
            let n = self.row(i);
            let g = &g_rows[i * self.dim..(i + 1) * self.dim];
            let d: f64 = n.iter().zip(g).map(|(a, b)| a * b).sum();
            for k in 0..self.dim {
                out[i * self.dim + k] = (g[k] - n[k] * d) / self.norms[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub margin: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            margin: 0.5,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

/// A loss value with gradients for each input batch, in argument order,
/// with respect to raw rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

fn pair_shapes(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.is_empty() {
        return Err(Error::invalid("empty embedding batch"));
    }
    if a.len() != b.len() || a.dim != b.dim {
        return Err(Error::dims(format!(
            "batches {}x{} and {}x{} are not paired",
            a.len(),
            a.dim,
            b.len(),
            b.dim
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE on normalised rows, with gradients on those rows.
fn info_nce_rows(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, d) = (a.len(), a.dim);
    let s: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
        })
        .collect();
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(s[i * n..(i + 1) * n].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| s[i * n + j]))).collect();
    let l_ab: f64 = (0..n).map(|i| s[i * n + i] - row_lse[i]).sum::<f64>() / n as f64;
    let l_ba: f64 = (0..n).map(|j| s[j * n + j] - col_lse[j]).sum::<f64>() / n as f64;
    let value = -0.5 * (l_ab + l_ba);

    // dL/dS_ij = -(2δ_ij - P_ij - C_ij) / 2N with P row- and C column-softmax
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let sij = s[i * n + j];
            let p = (sij - row_lse[i]).exp();
            let c = (sij - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            let g = -(delta - p - c) / (2.0 * n as f64) / tau;
            for k in 0..d {
                ga[i * d + k] += g * b.rows[j * d + k];
                gb[j * d + k] += g * a.rows[i * d + k];
            }
        }
    }
    (value, ga, gb)
}

/// `-(ℓ_{a→b} + ℓ_{b→a}) / 2`, each direction the mean log-softmax of the
/// matched similarity at temperature `tau`. Non-negative.
pub fn info_nce_pair(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> Result<f64> {
    info_nce_pair_grad(a, b, tau).map(|l| l.value)
}

pub fn info_nce_pair_grad(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> Result<LossGrad> {
    pair_shapes(a, b)?;
    check_tau(tau)?;
    let (value, ga, gb) = info_nce_rows(a, b, tau);
    Ok(LossGrad {
        value,
        grads: vec![a.normalize_vjp(&ga), b.normalize_vjp(&gb)],
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over anchors of `max(0, ‖s_i − p_i‖ − min_{j≠i} ‖s_i − p_j‖ + m)`.
pub fn triplet_loss(s: &EmbeddingBatch, p: &EmbeddingBatch, margin: f64) -> Result<f64> {
    triplet_loss_grad(s, p, margin).map(|l| l.value)
}

/// The gradient uses the lowest-index nearest negative and treats a zero
/// distance as having zero gradient.
pub fn triplet_loss_grad(s: &EmbeddingBatch, p: &EmbeddingBatch, margin: f64) -> Result<LossGrad> {
    pair_shapes(s, p)?;
    if s.len() < 2 {
        return Err(Error::invalid("triplet loss needs at least two pairs"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("margin must be non-negative, got {margin}")));
    }
    let (n, d) = (s.len(), s.dim);
    let mut value = 0.0;
    let mut gs = vec![0.0; n * d];
    let mut gp = vec![0.0; n * d];
    let pull = |gs: &mut [f64], gp: &mut [f64], i: usize, j: usize, sign: f64| {
        let (si, pj) = (s.row(i), p.row(j));
        let dd = dist(si, pj);
        if dd > 0.0 {
            for k in 0..d {
                let u = sign * (si[k] - pj[k]) / dd / n as f64;
                gs[i * d + k] += u;
                gp[j * d + k] -= u;
            }
        }
    };
    for i in 0..n {
        let own = dist(s.row(i), p.row(i));
        let (mut neg, mut best) = (usize::MAX, f64::INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            let dj = dist(s.row(i), p.row(j));
            if dj < best {
                best = dj;
                neg = j;
            }
        }
        let h = own - best + margin;
        if h > 0.0 {
            value += h / n as f64;
            pull(&mut gs, &mut gp, i, i, 1.0);
            pull(&mut gs, &mut gp, i, neg, -1.0);
        }
    }
    Ok(LossGrad {
        value,
        grads: vec![s.normalize_vjp(&gs), p.normalize_vjp(&gp)],
    })
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// `L_{P↔I} + L_{P↔T}`. Gradients in order P, T, I.
pub fn stage1_loss_grad(p: &EmbeddingBatch, t: &EmbeddingBatch, i: &EmbeddingBatch, tau: f64) -> Result<LossGrad> {
    let pi = info_nce_pair_grad(p, i, tau)?;
    let pt = info_nce_pair_grad(p, t, tau)?;
    let mut gp = pi.grads[0].clone();
    add_into(&mut gp, &pt.grads[0], 1.0);
    Ok(LossGrad {
        value: pi.value + pt.value,
        grads: vec![gp, pt.grads[1].clone(), pi.grads[1].clone()],
    })
}

pub fn stage1_loss(p: &EmbeddingBatch, t: &EmbeddingBatch, i: &EmbeddingBatch, tau: f64) -> Result<f64> {
    stage1_loss_grad(p, t, i, tau).map(|l| l.value)
}

/// `(L_{P↔I} + L_{S↔I} + L_{P↔S}) / 3 + triplet(S, P)`. Gradients in order S, P, I.
pub fn stage2_loss_grad(
    s: &EmbeddingBatch,
    p: &EmbeddingBatch,
    i: &EmbeddingBatch,
    cfg: &ContrastConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    let tau = cfg.temperature;
    let trip = triplet_loss_grad(s, p, cfg.margin)?;
    let pi = info_nce_pair_grad(p, i, tau)?;
    let si = info_nce_pair_grad(s, i, tau)?;
    let ps = info_nce_pair_grad(p, s, tau)?;
    let third = 1.0 / 3.0;
    let mut gs = trip.grads[0].clone();
    add_into(&mut gs, &si.grads[0], third);
    add_into(&mut gs, &ps.grads[1], third);
    let mut gp = trip.grads[1].clone();
    add_into(&mut gp, &pi.grads[0], third);
    add_into(&mut gp, &ps.grads[0], third);
    let mut gi = vec![0.0; i.raw.len()];
    add_into(&mut gi, &pi.grads[1], third);
    add_into(&mut gi, &si.grads[1], third);
    Ok(LossGrad {
        value: (pi.value + si.value + ps.value) / 3.0 + trip.value,
        grads: vec![gs, gp, gi],
    })
}

pub fn stage2_loss(s: &EmbeddingBatch, p: &EmbeddingBatch, i: &EmbeddingBatch, cfg: &ContrastConfig) -> Result<f64> {
    stage2_loss_grad(s, p, i, cfg).map(|l| l.value)
}
