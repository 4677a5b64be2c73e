//! Learned-query attention that distils a token sequence into a fixed
//! number of rows, and the sketch/text fusion built on it.

use nalgebra::DMatrix;

use super::params::{affine, affine_vjp, silu, silu_grad, softmax_rows, softmax_rows_vjp, Init, ParamStore};
use crate::error::{ensure_finite, Error, Result};

pub const QUERIES: usize = 16;

const QUERY: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const W1: usize = 3;
const B1: usize = 4;
const W2: usize = 5;
const B2: usize = 6;

/// `out = O + W2 SiLU(W1 O + b1) + b2` with `O = softmax(Q Kᵀ/√C) V`,
/// `K = X Wkᵀ`, `V = X Wvᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceiver {
    pub channels: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct PerceiverTrace {
    pub keys: DMatrix<f64>,
    pub values: DMatrix<f64>,
    /// `QUERIES × L`, rows sum to one.
    pub attention: DMatrix<f64>,
    pub attended: DMatrix<f64>,
    pub pre_act: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl Perceiver {
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        let c = channels;
        let params = ParamStore::build(
            &[
                ("perceiver.query", QUERIES, c, Init::Fan(1.0)),
                ("perceiver.wk", c, c, Init::Fan(1.0)),
                ("perceiver.wv", c, c, Init::Fan(1.0)),
                ("perceiver.w1", hidden, c, Init::Fan(1.0)),
                ("perceiver.b1", hidden, 1, Init::Zero),
                ("perceiver.w2", c, hidden, Init::Fan(0.1)),
                ("perceiver.b2", c, 1, Init::Zero),
            ],
            seed,
        );
        Self {
            channels,
            hidden,
            params,
        }
    }

    /// Identity key/value projections and a zero feed-forward branch.
    pub fn identity(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::new(channels, hidden, seed);
        for i in [WK, WV] {
            let s = p.params.slice_mut(i);
            s.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..channels {
                s[k * channels + k] = 1.0;
            }
        }
        for i in [W1, B1, W2, B2] {
            p.params.slice_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    fn check(&self, tokens: &DMatrix<f64>) -> Result<()> {
        if tokens.nrows() == 0 || tokens.ncols() != self.channels {
            return Err(Error::dims(format!(
                "perceiver expects L x {} tokens with L >= 1, got {}x{}",
                self.channels,
                tokens.nrows(),
                tokens.ncols()
            )));
        }
        ensure_finite(tokens.as_slice(), "condition tokens")
    }

    pub fn forward(&self, tokens: &DMatrix<f64>) -> Result<PerceiverTrace> {
        self.check(tokens)?;
        let p = &self.params;
        let keys = tokens * p.mat(WK).transpose();
        let values = tokens * p.mat(WV).transpose();
        let scores = (p.mat(QUERY) * keys.transpose()) / (self.channels as f64).sqrt();
        let attention = softmax_rows(&scores);
        let attended = &attention * &values;
        let pre_act = affine(&attended, &p.mat(W1), &p.mat(B1));
        let act = pre_act.map(silu);
        let output = &attended + affine(&act, &p.mat(W2), &p.mat(B2));
        Ok(PerceiverTrace {
            keys,
            values,
            attention,
            attended,
            pre_act,
            output,
        })
    }

    pub fn reduce(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(tokens)?.output)
    }

    /// Parameter gradients (packed) and the token gradient of
    /// `Σ g_out ⊙ reduce(tokens)`.
    pub fn backward(&self, tokens: &DMatrix<f64>, g_out: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let tr = self.forward(tokens)?;
        if g_out.shape() != tr.output.shape() {
            return Err(Error::dims("perceiver output gradient has the wrong shape"));
        }
        let p = &self.params;
        let act = tr.pre_act.map(silu);
        let (g_act, g_w2, g_b2) = affine_vjp(&act, &p.mat(W2), g_out);
        let g_pre = g_act.component_mul(&tr.pre_act.map(silu_grad));
        let (g_att_ff, g_w1, g_b1) = affine_vjp(&tr.attended, &p.mat(W1), &g_pre);
        let g_attended = g_out + g_att_ff;
        let g_attention = &g_attended * tr.values.transpose();
        let g_values = tr.attention.transpose() * &g_attended;
        let g_scores = softmax_rows_vjp(&tr.attention, &g_attention) / (self.channels as f64).sqrt();
        let g_query = &g_scores * &tr.keys;
        let g_keys = g_scores.transpose() * p.mat(QUERY);
        let g_wk = g_keys.transpose() * tokens;
        let g_wv = g_values.transpose() * tokens;
        let g_tokens = g_keys * p.mat(WK) + g_values * p.mat(WV);
        let grads = p.pack(&[g_query, g_wk, g_wv, g_w1, g_b1, g_w2, g_b2])?;
        Ok((grads, g_tokens))
    }
}

/// Sketch rows first, then the text row.
pub fn fuse_condition(reduced: &DMatrix<f64>, text: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if text.nrows() != 1 || reduced.ncols() != text.ncols() {
        return Err(Error::dims(format!(
            "cannot fuse {}x{} sketch rows with a {}x{} text embedding",
            reduced.nrows(),
            reduced.ncols(),
            text.nrows(),
            text.ncols()
        )));
    }
    let mut fused = DMatrix::zeros(reduced.nrows() + 1, reduced.ncols());
    fused.rows_mut(0, reduced.nrows()).copy_from(reduced);
    fused.row_mut(reduced.nrows()).copy_from(&text.row(0));
    Ok(fused)
}

/// Sketch tokens and a pooled text embedding for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub sketch_tokens: DMatrix<f64>,
    pub text_embedding: DMatrix<f64>,
}

impl ConditionBundle {
    pub fn new(sketch_tokens: DMatrix<f64>, text_embedding: DMatrix<f64>) -> Result<Self> {
        if sketch_tokens.nrows() == 0 || text_embedding.nrows() != 1 || sketch_tokens.ncols() != text_embedding.ncols() {
            return Err(Error::dims("condition needs L >= 1 sketch tokens and one text row of equal width"));
        }
        ensure_finite(sketch_tokens.as_slice(), "sketch tokens")?;
        ensure_finite(text_embedding.as_slice(), "text embedding")?;
        Ok(Self {
            sketch_tokens,
            text_embedding,
        })
    }

    pub fn channels(&self) -> usize {
        self.text_embedding.ncols()
    }

    pub fn fused(&self, perceiver: &Perceiver) -> Result<DMatrix<f64>> {
        fuse_condition(&perceiver.reduce(&self.sketch_tokens)?, &self.text_embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;

    fn tokens(l: usize, c: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_fn(l, c, |i, j| ((seed as f64 + 1.3 * i as f64 + 0.7 * j as f64) * 1.91).sin())
    }

    #[test]
    fn single_token_passes_through() {
        let p = Perceiver::identity(8, 8, 3);
        let t = tokens(1, 8, 2);
        let out = p.reduce(&t).unwrap();
        assert_eq!(out.shape(), (QUERIES, 8));
        for r in 0..QUERIES {
            for c in 0..8 {
                assert!((out[(r, c)] - t[(0, c)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let p = Perceiver::new(6, 10, 1);
        let row = tokens(1, 6, 9);
        let t = DMatrix::from_fn(5, 6, |_, j| row[(0, j)]);
        let out = p.reduce(&t).unwrap();
        for r in 1..QUERIES {
            for c in 0..6 {
                assert!((out[(r, c)] - out[(0, c)]).abs() < 1e-12);
            }
        }
        assert!(p.reduce(&DMatrix::zeros(0, 6)).is_err());
        assert!(p.reduce(&DMatrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn fusion_order_and_shape() {
        let r = DMatrix::from_fn(16, 8, |i, j| (i * 8 + j) as f64);
        let t = DMatrix::from_fn(1, 8, |_, j| -(j as f64));
        let f = fuse_condition(&r, &t).unwrap();
        assert_eq!(f.shape(), (17, 8));
        assert_eq!(f.rows(0, 16), r.rows(0, 16));
        assert_eq!(f.row(16), t.row(0));
        assert!(fuse_condition(&r, &DMatrix::zeros(2, 8)).is_err());
        assert!(fuse_condition(&r, &DMatrix::zeros(1, 7)).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        let p = Perceiver::new(4, 5, 7);
        let t = tokens(6, 4, 1);
        let g = DMatrix::from_fn(QUERIES, 4, |i, j| ((i * 4 + j) as f64 * 0.37).cos());
        let (gp, gt) = p.backward(&t, &g).unwrap();
        let f_params = |v: &[f64]| {
            let q = Perceiver {
                params: p.params.with_values(v.to_vec()).unwrap(),
                ..p.clone()
            };
            q.reduce(&t).unwrap().dot(&g)
        };
        for (a, n) in gp.iter().zip(central_difference(f_params, &p.params.values, 1e-6)) {
            assert!(relative_error(*a, n, 1e-5) < 1e-4, "{a} vs {n}");
        }
        let f_tokens = |v: &[f64]| p.reduce(&DMatrix::from_column_slice(6, 4, v)).unwrap().dot(&g);
        for (a, n) in gt.iter().zip(central_difference(f_tokens, t.as_slice(), 1e-6)) {
            assert!(relative_error(*a, n, 1e-5) < 1e-4, "{a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_convex(l in 1usize..40, seed in 0u64..500) {
            let p = Perceiver::new(5, 6, seed);
            let t = tokens(l, 5, seed) * 3.0;
            let tr = p.forward(&t).unwrap();
            for r in 0..QUERIES {
                prop_assert!((tr.attention.row(r).sum() - 1.0).abs() < 1e-9);
                prop_assert!(tr.attention.row(r).iter().all(|&a| a >= 0.0));
                // pre-residual rows stay inside the value bounding box
                for c in 0..5 {
                    let col = tr.values.column(c);
                    prop_assert!(tr.attended[(r, c)] >= col.min() - 1e-12 && tr.attended[(r, c)] <= col.max() + 1e-12);
                }
            }
        }
    }
}
