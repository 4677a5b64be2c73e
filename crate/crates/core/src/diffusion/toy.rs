//! Four voxelised shell objects with synthetic sketch and text conditions.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::perceiver::ConditionBundle;
use super::train::DiffusionItem;
use crate::error::Result;
use crate::gaussian::{Gaussian, GaussianCloud, IDENTITY_QUAT};
use crate::scene::{orbit_cameras, render_views};
use crate::voxel::{structure, unstructure, voxel_centers, Bounds};

/// Sketch tokens per object before reduction.
pub const SKETCH_TOKENS: usize = 129;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub n: usize,
    pub channels: usize,
    pub views: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n: 8,
            channels: 16,
            views: 4,
            image_size: 32,
            seed: 0,
        }
    }
}

pub fn toy_bounds() -> Bounds {
    (Vector3::repeat(-1.0), Vector3::repeat(1.0))
}

const OBJECTS: [(&str, f64, [f64; 3]); 4] = [
    ("sphere", 0.10, [0.9, 0.2, 0.2]),
    ("cube", 0.13, [0.2, 0.7, 0.3]),
    ("cylinder", 0.08, [0.2, 0.3, 0.9]),
    ("torus", 0.11, [0.9, 0.8, 0.2]),
];

pub fn toy_names() -> Vec<&'static str> {
    OBJECTS.iter().map(|o| o.0).collect()
}

fn occupied(shape: &str, p: &Vector3<f64>) -> bool {
    let radial = (p.x * p.x + p.y * p.y).sqrt();
    match shape {
        "sphere" => (p.norm() - 0.6).abs() < 0.25,
        "cube" => (0.4..0.7).contains(&p.amax()),
        "cylinder" => (0.35..0.7).contains(&radial) && p.z.abs() < 0.7,
        _ => (radial - 0.55).powi(2) + p.z * p.z < 0.3 * 0.3,
    }
}

/// One Gaussian near every cell centre of `[-1, 1]³`: opaque and coloured on
/// the shape's shell, faint grey elsewhere.
fn object_cloud(index: usize, n: usize, rng: &mut impl Rng) -> Result<GaussianCloud> {
    let (shape, size, color) = OBJECTS[index];
    let cell = 2.0 / n as f64;
    voxel_centers(n, &toy_bounds())?
        .into_iter()
        .map(|c| {
            let jitter = Vector3::from_fn(|_, _| 0.15 * cell * (rng.random::<f64>() - 0.5));
            if occupied(shape, &c) {
                Gaussian::new(c + jitter, IDENTITY_QUAT, Vector3::repeat(size), 0.9, Vector3::from(color))
            } else {
                Gaussian::new(c + jitter, IDENTITY_QUAT, Vector3::repeat(0.03), 0.02, Vector3::repeat(0.5))
            }
        })
        .collect()
}

/// Sketch tokens scatter around a per-object code; the text row is a second
/// independent code.
fn condition(channels: usize, rng: &mut impl Rng) -> Result<ConditionBundle> {
    let code: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
    let sketch = DMatrix::from_fn(SKETCH_TOKENS, channels, |_, j| {
        code[j] + 0.5 * rng.sample::<f64, _>(StandardNormal)
    });
    let text = DMatrix::from_fn(1, channels, |_, _| rng.sample(StandardNormal));
    ConditionBundle::new(sketch, text)
}

pub fn toy_dataset(spec: &ToySpec) -> Result<Vec<DiffusionItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let cams = orbit_cameras(spec.views, 3.2, Vector3::zeros(), 1.2 * s as f64, s, s)?;
    (0..OBJECTS.len())
        .map(|i| {
            let cloud = object_cloud(i, spec.n, &mut rng)?;
            let grid = structure(&cloud, &toy_bounds())?;
            let views = render_views(&unstructure(&grid)?, &cams);
            Ok(DiffusionItem {
                grid,
                condition: condition(spec.channels, &mut rng)?,
                views,
            })
        })
        .collect()
}
