//! Noise predictors over cell-major `n³ × 14` grids.

use nalgebra::DMatrix;

use super::params::{affine, affine_vjp, silu, silu_grad, softmax_rows, softmax_rows_vjp, Init, ParamStore};
use super::schedule::Schedule;
use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::CHANNELS;
use crate::voxel::cell_index;

/// Maps a noisy grid, its timestep and the fused condition to a noise
/// estimate of the same shape.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &[f64], n: usize, t: usize, fused: &DMatrix<f64>) -> Result<Vec<f64>>;
}

/// A predictor with a flat parameter vector and an analytic backward.
pub trait TrainablePredictor: NoisePredictor {
    fn params(&self) -> &[f64];

    fn set_params(&mut self, values: &[f64]) -> Result<()>;

    /// Parameter gradient and fused-token gradient of `Σ g_out ⊙ predict(..)`.
    fn backward(
        &self,
        x_t: &[f64],
        n: usize,
        t: usize,
        fused: &DMatrix<f64>,
        g_out: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

/// Knows the clean grid and returns the exact noise that produced `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePredictor {
    pub x0: Vec<f64>,
    pub schedule: Schedule,
}

impl NoisePredictor for OraclePredictor {
    fn predict(&self, x_t: &[f64], _n: usize, t: usize, _fused: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x_t.len() != self.x0.len() {
            return Err(Error::dims("oracle grid size differs from its clean sample"));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let b = (1.0 - ab).sqrt();
        if b == 0.0 {
            return Err(Error::invalid(format!("noise is unidentifiable at t = {t}")));
        }
        let a = ab.sqrt();
        Ok(x_t.iter().zip(&self.x0).map(|(x, c)| (x - a * c) / b).collect())
    }
}

impl TrainablePredictor for OraclePredictor {
    fn params(&self) -> &[f64] {
        &[]
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if !values.is_empty() {
            return Err(Error::dims("the oracle has no parameters"));
        }
        Ok(())
    }

    fn backward(&self, _: &[f64], _: usize, _: usize, fused: &DMatrix<f64>, _: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((Vec::new(), DMatrix::zeros(fused.nrows(), fused.ncols())))
    }
}

/// Grid position appended to each cell's channels.
const POS: usize = 3;

const ENC1_W: usize = 0;
const ENC1_B: usize = 1;
const ENC2_W: usize = 2;
const ENC2_B: usize = 3;
const TIME_W: usize = 4;
const TIME_B: usize = 5;
const ATT_Q: usize = 6;
const ATT_K: usize = 7;
const ATT_V: usize = 8;
const ATT_O: usize = 9;
const DEC2_W: usize = 10;
const DEC2_B: usize = 11;
const DEC1_W: usize = 12;
const DEC1_B: usize = 13;

/// Two resolution levels: a per-cell encoder, 2×2×2 average pooling, a
/// bottleneck encoder with an additive timestep embedding and one
/// cross-attention over the condition tokens, nearest upsampling, a skip
/// concatenation and two per-cell decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelUNet {
    pub hidden: usize,
    pub cond_channels: usize,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
struct Trace {
    input: DMatrix<f64>,
    z1: DMatrix<f64>,
    pooled: DMatrix<f64>,
    z2: DMatrix<f64>,
    bottleneck: DMatrix<f64>,
    query: DMatrix<f64>,
    keys: DMatrix<f64>,
    values: DMatrix<f64>,
    attention: DMatrix<f64>,
    attended: DMatrix<f64>,
    joined: DMatrix<f64>,
    z3: DMatrix<f64>,
    h3: DMatrix<f64>,
    output: DMatrix<f64>,
}

/// Sinusoidal embedding `[sin(t f_0), cos(t f_0), …]`, `f_i = 10000^(−2i/d)`.
pub fn timestep_embedding(t: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(1, dim, |_, j| {
        let f = 10000f64.powf(-((2 * (j / 2)) as f64) / dim as f64);
        let a = t as f64 * f;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Index of the coarse cell containing each fine cell.
fn parent_cells(n: usize) -> Vec<usize> {
    let m = n / 2;
    let mut out = vec![0; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                out[cell_index(n, x, y, z)] = cell_index(m, x / 2, y / 2, z / 2);
            }
        }
    }
    out
}

impl VoxelUNet {
    pub fn new(hidden: usize, cond_channels: usize, seed: u64) -> Self {
        let (h, c) = (hidden, cond_channels);
        let params = ParamStore::build(
            &[
                ("unet.enc1.w", h, CHANNELS + POS, Init::Fan(1.0)),
                ("unet.enc1.b", h, 1, Init::Zero),
                ("unet.enc2.w", h, h, Init::Fan(1.0)),
                ("unet.enc2.b", h, 1, Init::Zero),
                ("unet.time.w", h, h, Init::Fan(1.0)),
                ("unet.time.b", h, 1, Init::Zero),
                ("unet.attn.q", h, h, Init::Fan(1.0)),
                ("unet.attn.k", h, c, Init::Fan(1.0)),
                ("unet.attn.v", h, c, Init::Fan(1.0)),
                ("unet.attn.o", h, h, Init::Fan(0.5)),
                ("unet.dec2.w", h, 2 * h, Init::Fan(1.0)),
                ("unet.dec2.b", h, 1, Init::Zero),
                ("unet.dec1.w", CHANNELS, h, Init::Fan(0.1)),
                ("unet.dec1.b", CHANNELS, 1, Init::Zero),
            ],
            seed,
        );
        Self {
            hidden,
            cond_channels,
            params,
        }
    }

    fn check(&self, x_t: &[f64], n: usize, fused: &DMatrix<f64>) -> Result<()> {
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::invalid(format!("grid side {n} must be even and at least 2")));
        }
        if x_t.len() != n * n * n * CHANNELS {
            return Err(Error::dims(format!("{} values do not form a {n}^3 x {CHANNELS} grid", x_t.len())));
        }
        if fused.nrows() == 0 || fused.ncols() != self.cond_channels {
            return Err(Error::dims(format!(
                "condition has {} channels, predictor expects {}",
                fused.ncols(),
                self.cond_channels
            )));
        }
        ensure_finite(x_t, "noisy grid")?;
        ensure_finite(fused.as_slice(), "condition tokens")
    }

    fn forward(&self, x_t: &[f64], n: usize, t: usize, fused: &DMatrix<f64>) -> Result<Trace> {
        self.check(x_t, n, fused)?;
        let p = &self.params;
        let h = self.hidden;
        let cells = n * n * n;
        let coarse = cells / 8;
        let mut input = DMatrix::zeros(cells, CHANNELS + POS);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let k = cell_index(n, x, y, z);
                    for c in 0..CHANNELS {
                        input[(k, c)] = x_t[k * CHANNELS + c];
                    }
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        input[(k, CHANNELS + a)] = (2 * v + 1) as f64 / n as f64 - 1.0;
                    }
                }
            }
        }
        let z1 = affine(&input, &p.mat(ENC1_W), &p.mat(ENC1_B));
        let h1 = z1.map(silu);
        let parents = parent_cells(n);
        let mut pooled = DMatrix::zeros(coarse, h);
        for (k, &pk) in parents.iter().enumerate() {
            for j in 0..h {
                pooled[(pk, j)] += 0.125 * h1[(k, j)];
            }
        }
        let z2 = affine(&pooled, &p.mat(ENC2_W), &p.mat(ENC2_B));
        let time = affine(&timestep_embedding(t, h), &p.mat(TIME_W), &p.mat(TIME_B));
        let mut bottleneck = z2.map(silu);
        for mut row in bottleneck.row_iter_mut() {
            row += &time;
        }
        let query = &bottleneck * p.mat(ATT_Q).transpose();
        let keys = fused * p.mat(ATT_K).transpose();
        let values = fused * p.mat(ATT_V).transpose();
        let attention = softmax_rows(&((&query * keys.transpose()) / (h as f64).sqrt()));
        let attended = &attention * &values;
        let mixed = &bottleneck + &attended * p.mat(ATT_O).transpose();
        let mut joined = DMatrix::zeros(cells, 2 * h);
        for (k, &pk) in parents.iter().enumerate() {
            for j in 0..h {
                joined[(k, j)] = mixed[(pk, j)];
                joined[(k, h + j)] = h1[(k, j)];
            }
        }
        let z3 = affine(&joined, &p.mat(DEC2_W), &p.mat(DEC2_B));
        let h3 = z3.map(silu);
        let output = affine(&h3, &p.mat(DEC1_W), &p.mat(DEC1_B));
        Ok(Trace {
            input,
            z1,
            pooled,
            z2,
            bottleneck,
            query,
            keys,
            values,
            attention,
            attended,
            joined,
            z3,
            h3,
            output,
        })
    }

    /// Cross-attention weights of each bottleneck cell over the condition.
    pub fn attention(&self, x_t: &[f64], n: usize, t: usize, fused: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x_t, n, t, fused)?.attention)
    }
}

fn to_grid(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        out.extend(row.iter());
    }
    out
}

impl NoisePredictor for VoxelUNet {
    fn predict(&self, x_t: &[f64], n: usize, t: usize, fused: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(to_grid(&self.forward(x_t, n, t, fused)?.output))
    }
}

impl TrainablePredictor for VoxelUNet {
    fn params(&self) -> &[f64] {
        &self.params.values
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params = self.params.with_values(values.to_vec())?;
        Ok(())
    }

    fn backward(
        &self,
        x_t: &[f64],
        n: usize,
        t: usize,
        fused: &DMatrix<f64>,
        g_out: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let tr = self.forward(x_t, n, t, fused)?;
        if g_out.len() != tr.output.len() {
            return Err(Error::dims("predictor output gradient has the wrong length"));
        }
        let p = &self.params;
        let h = self.hidden;
        let cells = n * n * n;
        let g_y = DMatrix::from_row_slice(cells, CHANNELS, g_out);

        let (g_h3, g_dec1_w, g_dec1_b) = affine_vjp(&tr.h3, &p.mat(DEC1_W), &g_y);
        let g_z3 = g_h3.component_mul(&tr.z3.map(silu_grad));
        let (g_joined, g_dec2_w, g_dec2_b) = affine_vjp(&tr.joined, &p.mat(DEC2_W), &g_z3);

        let parents = parent_cells(n);
        let mut g_mixed = DMatrix::zeros(cells / 8, h);
        let mut g_h1 = DMatrix::zeros(cells, h);
        for (k, &pk) in parents.iter().enumerate() {
            for j in 0..h {
                g_mixed[(pk, j)] += g_joined[(k, j)];
                g_h1[(k, j)] = g_joined[(k, h + j)];
            }
        }

        let wo = p.mat(ATT_O);
        let g_attended = &g_mixed * &wo;
        let g_att_o = g_mixed.transpose() * &tr.attended;
        let g_attention = &g_attended * tr.values.transpose();
        let g_values = tr.attention.transpose() * &g_attended;
        let g_scores = softmax_rows_vjp(&tr.attention, &g_attention) / (h as f64).sqrt();
        let g_query = &g_scores * &tr.keys;
        let g_keys = g_scores.transpose() * &tr.query;
        let g_att_q = g_query.transpose() * &tr.bottleneck;
        let g_att_k = g_keys.transpose() * fused;
        let g_att_v = g_values.transpose() * fused;
        let g_fused = &g_keys * p.mat(ATT_K) + &g_values * p.mat(ATT_V);
        let g_bottleneck = &g_mixed + &g_query * p.mat(ATT_Q);

        let g_time = DMatrix::from_row_slice(1, h, g_bottleneck.row_sum().as_slice());
        let (_, g_time_w, g_time_b) = affine_vjp(&timestep_embedding(t, h), &p.mat(TIME_W), &g_time);
        let g_z2 = g_bottleneck.component_mul(&tr.z2.map(silu_grad));
        let (g_pooled, g_enc2_w, g_enc2_b) = affine_vjp(&tr.pooled, &p.mat(ENC2_W), &g_z2);
        for (k, &pk) in parents.iter().enumerate() {
            for j in 0..h {
                g_h1[(k, j)] += 0.125 * g_pooled[(pk, j)];
            }
        }
        let g_z1 = g_h1.component_mul(&tr.z1.map(silu_grad));
        let (_, g_enc1_w, g_enc1_b) = affine_vjp(&tr.input, &p.mat(ENC1_W), &g_z1);
        let grads = p.pack(&[
            g_enc1_w, g_enc1_b, g_enc2_w, g_enc2_b, g_time_w, g_time_b, g_att_q, g_att_k, g_att_v, g_att_o, g_dec2_w,
            g_dec2_b, g_dec1_w, g_dec1_b,
        ])?;
        Ok((grads, g_fused))
    }
}
