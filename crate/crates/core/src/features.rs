//! Image feature extractors for the perceptual term of the image loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Channels-last feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Maps an interleaved RGB image to a list of feature maps, and pulls
/// gradients on those maps back to the image.
pub trait FeatureExtractor: Sync + Send {
    fn extract(&self, image: &[f64], width: usize, height: usize) -> Vec<FeatureMap>;

    fn backward(&self, image: &[f64], width: usize, height: usize, grads: &[FeatureMap]) -> Vec<f64>;
}

/// No features; the image loss reduces to pixel L1.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullExtractor;

impl FeatureExtractor for NullExtractor {
    fn extract(&self, _: &[f64], _: usize, _: usize) -> Vec<FeatureMap> {
        Vec::new()
    }

    fn backward(&self, image: &[f64], _: usize, _: usize, _: &[FeatureMap]) -> Vec<f64> {
        vec![0.0; image.len()]
    }
}

pub const DEFAULT_PYRAMID_SEED: u64 = 0x5eed_f00d;

/// Three stride-2 3x3 convolutions with ReLU, weights drawn once from a fixed
/// seed (He-normal). Stands in for a pretrained perceptual network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPyramid {
    pub seed: u64,
    channels: Vec<usize>,
    /// Per level, `[out][in][ky][kx]`.
    weights: Vec<Vec<f64>>,
}

impl Default for ConvPyramid {
    fn default() -> Self {
        Self::new(DEFAULT_PYRAMID_SEED)
    }
}

impl ConvPyramid {
    pub fn new(seed: u64) -> Self {
        let channels = vec![3, 8, 16, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = channels
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect()
            })
            .collect();
        Self {
            seed,
            channels,
            weights,
        }
    }

    fn levels(&self) -> usize {
        self.weights.len()
    }

    /// Pre-activation output of level `l` applied to `input`.
    fn conv(&self, l: usize, input: &FeatureMap) -> FeatureMap {
        let (cin, cout) = (self.channels[l], self.channels[l + 1]);
        let (ow, oh) = (input.width.div_ceil(2), input.height.div_ceil(2));
        let w = &self.weights[l];
        let mut out = vec![0.0; ow * oh * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let src = &input.data[(iy as usize * input.width + ix as usize) * cin..][..cin];
                        for (o, d) in dst.iter_mut().enumerate() {
                            for (i, s) in src.iter().enumerate() {
                                *d += w[((o * cin + i) * 3 + ky) * 3 + kx] * s;
                            }
                        }
                    }
                }
            }
        }
        FeatureMap {
            width: ow,
            height: oh,
            channels: cout,
            data: out,
        }
    }

    /// Gradient of the conv input given the gradient of its output.
    fn conv_backward(&self, l: usize, input: &FeatureMap, g_out: &FeatureMap) -> Vec<f64> {
        let (cin, cout) = (self.channels[l], self.channels[l + 1]);
        let w = &self.weights[l];
        let mut g_in = vec![0.0; input.data.len()];
        for oy in 0..g_out.height {
            for ox in 0..g_out.width {
                let go = &g_out.data[(oy * g_out.width + ox) * cout..][..cout];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let gi = &mut g_in[(iy as usize * input.width + ix as usize) * cin..][..cin];
                        for (o, g) in go.iter().enumerate() {
                            for (i, d) in gi.iter_mut().enumerate() {
                                *d += w[((o * cin + i) * 3 + ky) * 3 + kx] * g;
                            }
                        }
                    }
                }
            }
        }
        g_in
    }

    fn forward_all(&self, image: &[f64], width: usize, height: usize) -> (Vec<FeatureMap>, Vec<FeatureMap>) {
        let mut inputs = vec![FeatureMap {
            width,
            height,
            channels: 3,
            data: image.to_vec(),
        }];
        let mut pre = Vec::new();
        for l in 0..self.levels() {
            let z = self.conv(l, &inputs[l]);
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            inputs.push(a);
        }
        (inputs, pre)
    }
}

impl FeatureExtractor for ConvPyramid {
    fn extract(&self, image: &[f64], width: usize, height: usize) -> Vec<FeatureMap> {
        let (mut inputs, _) = self.forward_all(image, width, height);
        inputs.remove(0);
        inputs
    }

    fn backward(&self, image: &[f64], width: usize, height: usize, grads: &[FeatureMap]) -> Vec<f64> {
        let (inputs, pre) = self.forward_all(image, width, height);
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..self.levels()).rev() {
            let mut g = grads[l].clone();
            if let Some(c) = carry.take() {
                for (a, b) in g.data.iter_mut().zip(c) {
                    *a += b;
                }
            }
            for (gv, z) in g.data.iter_mut().zip(&pre[l].data) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
            carry = Some(self.conv_backward(l, &inputs[l], &g));
        }
        carry.unwrap_or_else(|| vec![0.0; image.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes_and_determinism() {
        let img: Vec<f64> = (0..64 * 48 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        let p = ConvPyramid::default();
        let f = p.extract(&img, 64, 48);
        let dims: Vec<_> = f.iter().map(|m| (m.width, m.height, m.channels)).collect();
        assert_eq!(dims, vec![(32, 24, 8), (16, 12, 16), (8, 6, 16)]);
        assert_eq!(f, ConvPyramid::new(DEFAULT_PYRAMID_SEED).extract(&img, 64, 48));
        assert_ne!(f, ConvPyramid::new(1).extract(&img, 64, 48));
    }
}
