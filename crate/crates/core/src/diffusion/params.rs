//! Named dense parameter tensors stored in one flat vector.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Matrices stored column-major back to back, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub specs: Vec<TensorSpec>,
    pub values: Vec<f64>,
    offsets: Vec<usize>,
}

/// How to initialise a tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zero,
    /// Normal with standard deviation `gain / √cols`.
    Fan(f64),
    Identity,
}

impl ParamStore {
    pub fn build(layout: &[(&str, usize, usize, Init)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::zeros(layout.iter().map(|&(n, r, c, _)| (n.to_string(), r, c)).collect());
        for (i, &(_, rows, cols, init)) in layout.iter().enumerate() {
            let off = store.offsets[i];
            let slot = &mut store.values[off..off + rows * cols];
            match init {
                Init::Zero => {}
                Init::Fan(gain) => {
                    let d = Normal::new(0.0, gain / (cols as f64).sqrt()).expect("valid std");
                    slot.iter_mut().for_each(|v| *v = d.sample(&mut rng));
                }
                Init::Identity => {
                    for k in 0..rows.min(cols) {
                        slot[k * rows + k] = 1.0;
                    }
                }
            }
        }
        store
    }

    pub fn zeros(specs: Vec<(String, usize, usize)>) -> Self {
        let specs: Vec<TensorSpec> = specs
            .into_iter()
            .map(|(name, rows, cols)| TensorSpec { name, rows, cols })
            .collect();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.len();
        }
        Self {
            specs,
            values: vec![0.0; total],
            offsets,
        }
    }

    /// Same layout with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dims(format!("{} values for {} parameters", values.len(), self.values.len())));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        &self.values[self.offsets[i]..self.offsets[i] + self.specs[i].len()]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        let (off, len) = (self.offsets[i], self.specs[i].len());
        &mut self.values[off..off + len]
    }

    pub fn mat(&self, i: usize) -> DMatrix<f64> {
        let s = &self.specs[i];
        DMatrix::from_column_slice(s.rows, s.cols, self.slice(i))
    }

    pub fn get(&self, name: &str) -> Option<DMatrix<f64>> {
        self.index_of(name).map(|i| self.mat(i))
    }

    /// Flatten per-tensor gradients into this layout.
    pub fn pack(&self, grads: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        if grads.len() != self.specs.len() {
            return Err(Error::dims(format!("{} gradient tensors for {} parameters", grads.len(), self.specs.len())));
        }
        let mut out = Vec::with_capacity(self.len());
        for (g, s) in grads.iter().zip(&self.specs) {
            if g.nrows() != s.rows || g.ncols() != s.cols {
                return Err(Error::dims(format!(
                    "gradient of {} is {}x{}, expected {}x{}",
                    s.name,
                    g.nrows(),
                    g.ncols(),
                    s.rows,
                    s.cols
                )));
            }
            out.extend_from_slice(g.as_slice());
        }
        Ok(out)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise softmax, each row shifted by its maximum.
pub(crate) fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for mut row in a.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    a
}

/// Backward of a row-wise softmax `a` given `∂L/∂a`.
pub(crate) fn softmax_rows_vjp(a: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.component_mul(g);
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let d = a.row(i).dot(&g.row(i));
        for (j, v) in row.iter_mut().enumerate() {
            *v -= a[(i, j)] * d;
        }
    }
    out
}

/// `x Wᵀ + 1 bᵀ` for a row-major batch `x`.
pub(crate) fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x * w.transpose();
    for mut row in y.row_iter_mut() {
        row += b.transpose();
    }
    y
}

/// Gradients of `affine` given `∂L/∂y`: `(∂x, ∂W, ∂b)`.
pub(crate) fn affine_vjp(x: &DMatrix<f64>, w: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let gx = g * w;
    let gw = g.transpose() * x;
    let gb = DMatrix::from_column_slice(g.ncols(), 1, g.row_sum().as_slice());
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let p = ParamStore::build(&[("a", 2, 3, Init::Fan(1.0)), ("b", 3, 1, Init::Zero), ("c", 2, 2, Init::Identity)], 4);
        assert_eq!(p.len(), 6 + 3 + 4);
        assert_eq!(p.get("c").unwrap(), DMatrix::identity(2, 2));
        let grads = vec![p.mat(0), p.mat(1), p.mat(2)];
        assert_eq!(p.pack(&grads).unwrap(), p.values);
        assert!(p.pack(&grads[..2]).is_err());
        assert!(p.with_values(vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0]);
        let a = softmax_rows(&s);
        for r in 0..2 {
            assert!((a.row(r).sum() - 1.0).abs() < 1e-15);
        }
        assert!((a[(1, 0)] - 0.5).abs() < 1e-15 && a[(1, 2)] == 0.0);
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - num).abs() < 1e-9);
        }
    }
}
