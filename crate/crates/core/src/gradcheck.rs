//! Central finite-difference checks of the analytic gradients.
//!
//! Each checker builds a small random problem from a seed, evaluates the
//! analytic gradient once, and compares every coordinate against a central
//! difference of the forward function.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{
    info_nce_pair_grad, stage1_loss_grad, stage2_loss_grad, triplet_loss_grad, ContrastConfig, EmbeddingBatch, LossGrad,
    Modality,
};
use crate::camera::Camera;
use crate::diffusion::{ParamStore, Perceiver, TrainablePredictor, NoisePredictor, VoxelUNet, QUERIES};
use crate::error::Result;
use crate::gaussian::{layout, normalize_quat, Gaussian, GaussianCloud, CHANNELS};
use crate::raster::{render, render_backward, RenderGrads, RenderOutput};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub coords: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub component: String,
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of coordinates that must be within tolerance.
    pub required_fraction: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn coords(&self) -> usize {
        self.groups.iter().map(|g| g.coords).sum()
    }

    pub fn passed_coords(&self) -> usize {
        self.groups.iter().map(|g| g.passed).sum()
    }

    pub fn pass_fraction(&self) -> f64 {
        self.passed_coords() as f64 / self.coords().max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.pass_fraction() >= self.required_fraction
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    /// Pool the coordinates of another run of the same checker.
    pub fn merge(&mut self, other: &GradcheckReport) {
        for o in &other.groups {
            match self.groups.iter_mut().find(|g| g.name == o.name) {
                Some(g) => {
                    g.coords += o.coords;
                    g.passed += o.passed;
                    g.max_rel_err = g.max_rel_err.max(o.max_rel_err);
                }
                None => self.groups.push(o.clone()),
            }
        }
    }
}

/// Build a report from `(group, analytic, numeric)` triples.
pub(crate) fn summarize(
    component: &str,
    step: f64,
    tolerance: f64,
    required_fraction: f64,
    floor: f64,
    entries: impl IntoIterator<Item = (String, f64, f64)>,
) -> GradcheckReport {
    let mut groups: Vec<GroupReport> = Vec::new();
    for (name, a, n) in entries {
        let err = relative_error(a, n, floor);
        let g = match groups.iter_mut().position(|g| g.name == name) {
            Some(i) => &mut groups[i],
            None => {
                groups.push(GroupReport {
                    name,
                    coords: 0,
                    passed: 0,
                    max_rel_err: 0.0,
                });
                groups.last_mut().expect("just pushed")
            }
        };
        g.coords += 1;
        if err < tolerance {
            g.passed += 1;
        }
        g.max_rel_err = g.max_rel_err.max(err);
    }
    GradcheckReport {
        component: component.to_string(),
        step,
        tolerance,
        required_fraction,
        groups,
    }
}

/// Deliberate gradient corruption used to confirm a checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negate the first analytic gradient group.
    SignFlip,
}

pub const RASTER_STEP: f64 = 1e-4;
pub const RASTER_TOL: f64 = 1e-3;
pub const RASTER_FRACTION: f64 = 0.99;

/// Random scene of `n` Gaussians in front of an 8x8 camera at the origin.
pub fn random_raster_scene(seed: u64, n: usize) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = (0..n)
        .map(|_| Gaussian {
            position: Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(2.5..4.0)),
            rotation: normalize_quat(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]),
            log_scale: Vector3::new(
                rng.random_range(-1.6..-0.5),
                rng.random_range(-1.6..-0.5),
                rng.random_range(-1.6..-0.5),
            ),
            opacity_logit: rng.random_range(-1.0..2.0),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
        })
        .collect();
    let cam = Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8, Matrix3::identity(), Vector3::zeros()).expect("valid camera");
    (cloud, cam)
}

fn weighted_sum(out: &RenderOutput, up: &RenderGrads) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.color, &up.color) + dot(&out.depth, &up.depth) + dot(&out.normal, &up.normal) + dot(&out.alpha, &up.alpha)
}

const RAW_GROUPS: [(&str, std::ops::Range<usize>); 5] = [
    ("position", layout::POSITION),
    ("log_scale", layout::SCALE),
    ("rotation", layout::ROTATION),
    ("opacity_logit", layout::OPACITY..layout::OPACITY + 1),
    ("color", layout::COLOR),
];

fn raw_group(k: usize) -> &'static str {
    RAW_GROUPS.iter().find(|(_, r)| r.contains(&k)).map(|(n, _)| *n).expect("covered")
}

/// Rasteriser backward pass against central differences of the forward pass,
/// with a random linear functional of color, depth, normal and alpha as loss.
pub fn check_rasterizer(seed: u64, gaussians: usize, mutation: Mutation) -> Result<GradcheckReport> {
    let (cloud, cam) = random_raster_scene(seed, gaussians);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut up = RenderGrads::zeros(cam.width, cam.height);
    for v in up
        .color
        .iter_mut()
        .chain(up.depth.iter_mut())
        .chain(up.normal.iter_mut())
        .chain(up.alpha.iter_mut())
    {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut grads = render_backward(&cloud, &cam, &up)?;
    if mutation == Mutation::SignFlip {
        for g in &mut grads.raw {
            for k in layout::POSITION {
                g[k] = -g[k];
            }
        }
    }

    let x: Vec<f64> = cloud.iter().flat_map(|g| g.to_raw()).collect();
    let f = |x: &[f64]| {
        let c: GaussianCloud = x
            .chunks(CHANNELS)
            .map(|r| Gaussian::from_raw(r.try_into().expect("14 values")))
            .collect();
        weighted_sum(&render(&c, &cam), &up)
    };
    let numeric = central_difference(f, &x, RASTER_STEP);
    let entries = numeric.iter().enumerate().map(|(i, &n)| {
        let (g, k) = (i / CHANNELS, i % CHANNELS);
        (raw_group(k).to_string(), grads.raw[g][k], n)
    });
    Ok(summarize("rasterizer", RASTER_STEP, RASTER_TOL, RASTER_FRACTION, 1e-6, entries))
}

/// [`check_rasterizer`] pooled over `seeds` independent scenes. A central
/// step occasionally straddles the α′ cutoff, so a single 70-coordinate scene
/// is too small a sample for a 99% criterion.
pub fn check_rasterizer_pooled(seeds: std::ops::Range<u64>, gaussians: usize, mutation: Mutation) -> Result<GradcheckReport> {
    let mut report: Option<GradcheckReport> = None;
    for seed in seeds {
        let r = check_rasterizer(seed, gaussians, mutation)?;
        match report.as_mut() {
            Some(acc) => acc.merge(&r),
            None => report = Some(r),
        }
    }
    Ok(report.unwrap_or_else(|| summarize("rasterizer", RASTER_STEP, RASTER_TOL, RASTER_FRACTION, 1e-6, [])))
}

pub const ALIGN_STEP: f64 = 1e-5;
pub const ALIGN_TOL: f64 = 1e-4;

/// Every alignment loss on random unnormalised batches, differentiated with
/// respect to the raw rows. All coordinates must agree.
pub fn check_alignment(seed: u64, mutation: Mutation) -> Result<GradcheckReport> {
    const N: usize = 6;
    const D: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..N * D).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let inputs = [draw(), draw(), draw()];
    let cfg = ContrastConfig {
        temperature: 0.3,
        margin: 0.5,
    };
    let batch = |v: &[f64], m| EmbeddingBatch::new(m, D, v.to_vec());
    type Loss = fn(&[EmbeddingBatch], &ContrastConfig) -> Result<LossGrad>;
    let losses: [(&str, usize, Loss); 4] = [
        ("info_nce", 2, |b, c| info_nce_pair_grad(&b[0], &b[1], c.temperature)),
        ("triplet", 2, |b, c| triplet_loss_grad(&b[0], &b[1], c.margin)),
        ("stage1", 3, |b, c| stage1_loss_grad(&b[0], &b[1], &b[2], c.temperature)),
        ("stage2", 3, |b, c| stage2_loss_grad(&b[0], &b[1], &b[2], c)),
    ];
    let mut entries = Vec::new();
    for (name, arity, loss) in losses {
        let batches = |x: &[f64]| -> Result<Vec<EmbeddingBatch>> {
            (0..arity).map(|k| batch(&x[k * N * D..(k + 1) * N * D], Modality::S)).collect()
        };
        let x: Vec<f64> = inputs[..arity].concat();
        let mut analytic = loss(&batches(&x)?, &cfg)?.grads.concat();
        if mutation == Mutation::SignFlip {
            analytic[..N * D].iter_mut().for_each(|g| *g = -*g);
        }
        let f = |x: &[f64]| loss(&batches(x).expect("finite rows"), &cfg).expect("valid batch").value;
        for (a, n) in analytic.iter().zip(central_difference(f, &x, ALIGN_STEP)) {
            entries.push((name.to_string(), *a, n));
        }
    }
    Ok(summarize("alignment", ALIGN_STEP, ALIGN_TOL, 1.0, 1e-6, entries))
}

pub const NET_STEP: f64 = 1e-6;
pub const NET_TOL: f64 = 1e-4;
/// Parameters start near zero, so tiny gradients are compared absolutely.
pub const NET_FLOOR: f64 = 1e-5;

fn param_entries(
    store: &ParamStore,
    analytic: &[f64],
    numeric: &[f64],
) -> impl Iterator<Item = (String, f64, f64)> {
    let names: Vec<String> = store
        .specs
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.name.clone(), s.len()))
        .collect();
    names
        .into_iter()
        .zip(analytic.to_vec())
        .zip(numeric.to_vec())
        .map(|((n, a), x)| (n, a, x))
}

/// Reference noise predictor on a random 2³ grid: every parameter tensor and
/// the fused condition, with a random linear functional of the output as loss.
pub fn check_predictor(seed: u64, mutation: Mutation) -> Result<GradcheckReport> {
    const N: usize = 2;
    const C: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = VoxelUNet::new(6, C, seed);
    // zero-initialised biases would leave some paths untested
    let vals: Vec<f64> = net.params.values.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    net.set_params(&vals)?;
    let cells = N * N * N * CHANNELS;
    let x: Vec<f64> = (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g_out: Vec<f64> = (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fused = DMatrix::from_fn(5, C, |_, _| rng.random_range(-1.0..1.0));
    let t = rng.random_range(1..100);
    let (mut gp, gf) = net.backward(&x, N, t, &fused, &g_out)?;
    if mutation == Mutation::SignFlip {
        let first = net.params.specs[0].len();
        gp[..first].iter_mut().for_each(|g| *g = -*g);
    }
    let dot = |y: Vec<f64>| y.iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>();
    let f_params = |v: &[f64]| {
        let mut m = net.clone();
        m.set_params(v).expect("same length");
        dot(m.predict(&x, N, t, &fused).expect("valid input"))
    };
    let num_p = central_difference(f_params, &net.params.values, NET_STEP);
    let f_fused = |v: &[f64]| dot(net.predict(&x, N, t, &DMatrix::from_column_slice(5, C, v)).expect("valid input"));
    let num_f = central_difference(f_fused, fused.as_slice(), NET_STEP);
    let entries = param_entries(&net.params, &gp, &num_p)
        .chain(gf.iter().zip(num_f).map(|(a, n)| ("condition".to_string(), *a, n)))
        .collect::<Vec<_>>();
    Ok(summarize("predictor", NET_STEP, NET_TOL, 1.0, NET_FLOOR, entries))
}

/// Perceiver reducer on a random token sequence: every parameter tensor and
/// the input tokens.
pub fn check_perceiver(seed: u64, mutation: Mutation) -> Result<GradcheckReport> {
    const L: usize = 6;
    const C: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Perceiver::new(C, 5, seed);
    let tokens = DMatrix::from_fn(L, C, |_, _| rng.random_range(-1.0..1.0));
    let g = DMatrix::from_fn(QUERIES, C, |_, _| rng.random_range(-1.0..1.0));
    let (mut gp, gt) = p.backward(&tokens, &g)?;
    if mutation == Mutation::SignFlip {
        let first = p.params.specs[0].len();
        gp[..first].iter_mut().for_each(|v| *v = -*v);
    }
    let f_params = |v: &[f64]| {
        let q = Perceiver {
            params: p.params.with_values(v.to_vec()).expect("same length"),
            ..p.clone()
        };
        q.reduce(&tokens).expect("valid tokens").dot(&g)
    };
    let num_p = central_difference(f_params, &p.params.values, NET_STEP);
    let f_tokens = |v: &[f64]| p.reduce(&DMatrix::from_column_slice(L, C, v)).expect("valid tokens").dot(&g);
    let num_t = central_difference(f_tokens, tokens.as_slice(), NET_STEP);
    let entries = param_entries(&p.params, &gp, &num_p)
        .chain(gt.iter().zip(num_t).map(|(a, n)| ("tokens".to_string(), *a, n)))
        .collect::<Vec<_>>();
    Ok(summarize("perceiver", NET_STEP, NET_TOL, 1.0, NET_FLOOR, entries))
}
