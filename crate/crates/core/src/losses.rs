//! Refinement losses, their gradients, and evaluation metrics.

use crate::error::{Error, Result};
use crate::exec;
use crate::features::FeatureExtractor;

/// Weights of the diffusion, image, depth and normal terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineWeights {
    pub diffusion: f64,
    pub image: f64,
    pub depth: f64,
    pub normal: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        Self {
            diffusion: 1.0,
            image: 1.0,
            depth: 0.5,
            normal: 0.5,
        }
    }
}

impl RefineWeights {
    pub fn new(diffusion: f64, image: f64, depth: f64, normal: f64) -> Result<Self> {
        let w = Self {
            diffusion,
            image,
            depth,
            normal,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.diffusion, self.image, self.depth, self.normal] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

pub fn total_refine_loss(diff: f64, img: f64, depth: f64, normal: f64, w: &RefineWeights) -> f64 {
    w.diffusion * diff + w.image * img + w.depth * depth + w.normal * normal
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute difference and its gradient with respect to `pred`.
fn l1_with_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| match p.partial_cmp(g) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    (loss, grad)
}

/// Pixel L1 plus the mean squared difference of extracted feature maps
/// (averaged over pyramid levels). Images are interleaved RGB, `width * height * 3`.
pub fn image_loss(pred: &[f64], gt: &[f64], width: usize, height: usize, fx: &dyn FeatureExtractor) -> Result<f64> {
    image_loss_grad(pred, gt, width, height, fx).map(|(l, _)| l)
}

pub fn image_loss_grad(
    pred: &[f64],
    gt: &[f64],
    width: usize,
    height: usize,
    fx: &dyn FeatureExtractor,
) -> Result<(f64, Vec<f64>)> {
    same_len(pred, gt, "image_loss")?;
    if pred.len() != width * height * 3 {
        return Err(Error::dims(format!(
            "image_loss: {} values for a {width}x{height} RGB image",
            pred.len()
        )));
    }
    let (l1, mut grad) = l1_with_grad(pred, gt);

    let fp = fx.extract(pred, width, height);
    if fp.is_empty() {
        return Ok((l1, grad));
    }
    let fg = fx.extract(gt, width, height);
    let levels = fp.len() as f64;
    let mut perceptual = 0.0;
    let mut upstream = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&fg) {
        let n = a.data.len() as f64;
        perceptual += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n / levels;
        let mut g = a.clone();
        for (gv, (x, y)) in g.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
            *gv = 2.0 * (x - y) / n / levels;
        }
        upstream.push(g);
    }
    let g_feat = fx.backward(pred, width, height, &upstream);
    for (g, f) in grad.iter_mut().zip(g_feat) {
        *g += f;
    }
    Ok((l1 + perceptual, grad))
}

/// Which pixels a depth or normal loss is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    All,
    Pixels(Vec<bool>),
}

impl Mask {
    /// Pixels whose ground-truth coverage exceeds 0.5.
    pub fn from_alpha(alpha: &[f64]) -> Self {
        Mask::Pixels(alpha.iter().map(|&a| a > 0.5).collect())
    }

    /// Pixels with positive ground-truth depth.
    pub fn from_depth(depth: &[f64]) -> Self {
        Mask::Pixels(depth.iter().map(|&d| d > 0.0).collect())
    }

    fn includes(&self, p: usize) -> bool {
        match self {
            Mask::All => true,
            Mask::Pixels(m) => m[p],
        }
    }
}

fn masked_l1_grad(pred: &[f64], gt: &[f64], mask: &Mask, channels: usize) -> Result<(f64, Vec<f64>)> {
    same_len(pred, gt, "masked L1")?;
    if !pred.len().is_multiple_of(channels) {
        return Err(Error::dims(format!("{} values is not a multiple of {channels} channels", pred.len())));
    }
    let pixels = pred.len() / channels;
    if let Mask::Pixels(m) = mask {
        if m.len() != pixels {
            return Err(Error::dims(format!("mask has {} pixels, maps have {pixels}", m.len())));
        }
    }
    let count = (0..pixels).filter(|&p| mask.includes(p)).count();
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = (count * channels) as f64;
    let mut loss = 0.0;
    for p in (0..pixels).filter(|&p| mask.includes(p)) {
        for k in p * channels..(p + 1) * channels {
            let d = pred[k] - gt[k];
            loss += d.abs();
            grad[k] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((loss / n, grad))
}

pub fn depth_loss(pred: &[f64], gt: &[f64], mask: &Mask) -> Result<f64> {
    depth_loss_grad(pred, gt, mask).map(|(l, _)| l)
}

pub fn depth_loss_grad(pred: &[f64], gt: &[f64], mask: &Mask) -> Result<(f64, Vec<f64>)> {
    masked_l1_grad(pred, gt, mask, 1)
}

/// Normals are interleaved `xyz` per pixel.
pub fn normal_loss(pred: &[f64], gt: &[f64], mask: &Mask) -> Result<f64> {
    normal_loss_grad(pred, gt, mask).map(|(l, _)| l)
}

pub fn normal_loss_grad(pred: &[f64], gt: &[f64], mask: &Mask) -> Result<(f64, Vec<f64>)> {
    masked_l1_grad(pred, gt, mask, 3)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b, "mse")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Symmetric Chamfer distance: the mean squared nearest-neighbour distance from
/// `a` to `b` plus the same from `b` to `a`, halved.
pub fn chamfer_distance<const D: usize>(a: &[[f64; D]], b: &[[f64; D]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    Ok(0.5 * (one_sided(a, b) + one_sided(b, a)))
}

fn one_sided<const D: usize>(from: &[[f64; D]], to: &[[f64; D]]) -> f64 {
    let nearest = exec::map_slice(from, |p| {
        to.iter()
            .map(|q| (0..D).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    });
    nearest.iter().sum::<f64>() / from.len() as f64
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::features::{ConvPyramid, NullExtractor};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn image_loss_cases() {
        let fx = ConvPyramid::default();
        let a = random(8 * 6 * 3, 1);
        assert_eq!(image_loss(&a, &a, 8, 6, &fx).unwrap(), 0.0);
        let gt = vec![0.0; 12];
        let pred = vec![0.5; 12];
        assert_relative_eq!(image_loss(&pred, &gt, 2, 2, &NullExtractor).unwrap(), 0.5);
        assert!(image_loss(&pred, &gt[..9], 2, 2, &NullExtractor).is_err());
        assert!(image_loss(&pred, &gt, 3, 2, &NullExtractor).is_err());
    }

    #[test]
    fn image_loss_matches_recomputation() {
        let fx = ConvPyramid::default();
        let (w, h) = (12, 10);
        let a = random(w * h * 3, 2);
        let b = random(w * h * 3, 3);
        let l1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let fa = fx.extract(&a, w, h);
        let fb = fx.extract(&b, w, h);
        let mut feat = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let mut s = 0.0;
            for (p, q) in x.data.iter().zip(&y.data) {
                s += (p - q) * (p - q);
            }
            feat += s / x.data.len() as f64;
        }
        feat /= fa.len() as f64;
        assert_relative_eq!(image_loss(&a, &b, w, h, &fx).unwrap(), l1 + feat, epsilon = 1e-9);
    }

    #[test]
    fn image_loss_gradient_matches_finite_differences() {
        let fx = ConvPyramid::default();
        let (w, h) = (6, 5);
        let a = random(w * h * 3, 4);
        let b = random(w * h * 3, 5);
        let (_, g) = image_loss_grad(&a, &b, w, h, &fx).unwrap();
        for k in [0, 7, 33, 89] {
            let mut p = a.clone();
            p[k] += 1e-6;
            let lp = image_loss(&p, &b, w, h, &fx).unwrap();
            p[k] -= 2e-6;
            let lm = image_loss(&p, &b, w, h, &fx).unwrap();
            assert_relative_eq!(g[k], (lp - lm) / 2e-6, epsilon = 1e-7, max_relative = 1e-5);
        }
    }

    #[test]
    fn depth_and_normal_cases() {
        let d = random(20, 6);
        assert_eq!(depth_loss(&d, &d, &Mask::All).unwrap(), 0.0);
        let shifted: Vec<f64> = d.iter().map(|v| v + 0.1).collect();
        assert_relative_eq!(depth_loss(&shifted, &d, &Mask::All).unwrap(), 0.1, epsilon = 1e-12);
        let empty = Mask::Pixels(vec![false; 20]);
        assert_eq!(depth_loss(&shifted, &d, &empty).unwrap(), 0.0);

        let n = random(30, 7);
        let m = random(30, 8);
        let mask = Mask::Pixels((0..10).map(|i| i % 3 != 0).collect());
        let mut want = 0.0;
        let mut count = 0;
        for p in 0..10 {
            if p % 3 != 0 {
                for c in 0..3 {
                    want += (n[3 * p + c] - m[3 * p + c]).abs();
                    count += 1;
                }
            }
        }
        assert_relative_eq!(normal_loss(&n, &m, &mask).unwrap(), want / count as f64, epsilon = 1e-12);
        assert!(normal_loss(&n, &m[..27], &mask).is_err());
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        assert_eq!(total_refine_loss(2.0, 7.0, 7.0, 7.0, &RefineWeights::new(1.0, 0.0, 0.0, 0.0).unwrap()), 2.0);
        let w = RefineWeights::new(1.0, 1.0, 0.5, 0.5).unwrap();
        assert_eq!(total_refine_loss(1.0, 2.0, 2.0, 2.0, &w), 5.0);
        assert_eq!(total_refine_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!(RefineWeights::new(-1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn chamfer_cases() {
        assert_eq!(chamfer_distance(&[[0.0]], &[[1.0]]).unwrap(), 1.0);
        let pts = [[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]];
        assert_eq!(chamfer_distance(&pts, &pts).unwrap(), 0.0);
        assert!(chamfer_distance::<3>(&[], &pts).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = |n: usize| -> Vec<[f64; 3]> { (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
        let a = pts(100);
        let b = pts(100);
        let mut ab = 0.0;
        for p in &a {
            let mut best = f64::MAX;
            for q in &b {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            ab += best;
        }
        let mut ba = 0.0;
        for q in &b {
            let mut best = f64::MAX;
            for p in &a {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            ba += best;
        }
        let want = 0.5 * (ab / 100.0 + ba / 100.0);
        let got = chamfer_distance(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-12);
        assert!((got - chamfer_distance(&b, &a).unwrap()).abs() <= 1e-12);
    }
}
