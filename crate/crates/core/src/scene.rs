//! Synthetic desk-scale scene: a checkered cube and a sphere of Gaussians,
//! orbit cameras, and a noisy over-complete "pretrained" cloud.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{normalize_quat, Gaussian, GaussianCloud, Quat};
use crate::raster::render;
use crate::view::TrainingView;

/// Quaternion (w, x, y, z) of a rotation whose columns are `x`, `y`, `z`.
pub fn quat_from_basis(x: Vector3<f64>, y: Vector3<f64>, z: Vector3<f64>) -> Quat {
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let q = UnitQuaternion::from_rotation_matrix(&r);
    normalize_quat(&[q.w, q.i, q.j, q.k])
}

/// `n` cameras on a circle of radius `radius` around `target`, alternating
/// above and below the equator.
pub fn orbit_cameras(n: usize, radius: f64, target: Vector3<f64>, fx: f64, width: usize, height: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let az = i as f64 * std::f64::consts::TAU / n as f64;
            let el: f64 = if i % 2 == 0 { 0.35 } else { -0.25 };
            let eye = target + Vector3::new(az.cos() * el.cos(), el.sin(), az.sin() * el.cos()) * radius;
            Camera::look_at(eye, target, Vector3::y(), fx, width, height)
        })
        .collect()
}

const CUBE_CENTER: [f64; 3] = [-0.55, 0.0, 0.0];
const CUBE_HALF: f64 = 0.4;
const CUBE_CELLS: usize = 4;
const SPHERE_CENTER: [f64; 3] = [0.6, 0.0, 0.0];
const SPHERE_RADIUS: f64 = 0.35;
const SPHERE_POINTS: usize = 72;

/// Flat Gaussians tiling the six faces of a cube in a two-colour checker,
/// plus a Fibonacci sphere of round Gaussians shaded by latitude.
pub fn demo_scene() -> GaussianCloud {
    let mut out = Vec::new();
    let center = Vector3::from(CUBE_CENTER);
    let cell = 2.0 * CUBE_HALF / CUBE_CELLS as f64;
    let palette = [
        (Vector3::new(0.85, 0.25, 0.2), Vector3::new(0.95, 0.85, 0.3)),
        (Vector3::new(0.2, 0.45, 0.85), Vector3::new(0.9, 0.9, 0.9)),
        (Vector3::new(0.25, 0.7, 0.3), Vector3::new(0.1, 0.15, 0.3)),
    ];
    for (axis, &(c0, c1)) in palette.iter().enumerate() {
        for sign in [-1.0, 1.0] {
            let n = Vector3::ith(axis, sign);
            let u = Vector3::ith((axis + 1) % 3, 1.0);
            let v = n.cross(&u);
            for a in 0..CUBE_CELLS {
                for b in 0..CUBE_CELLS {
                    let du = -CUBE_HALF + (a as f64 + 0.5) * cell;
                    let dv = -CUBE_HALF + (b as f64 + 0.5) * cell;
                    out.push(Gaussian {
                        position: center + n * CUBE_HALF + u * du + v * dv,
                        rotation: quat_from_basis(u, v, n),
                        log_scale: Vector3::new((0.55 * cell).ln(), (0.55 * cell).ln(), 0.01f64.ln()),
                        opacity_logit: 3.0,
                        color: if (a + b) % 2 == 0 { c0 } else { c1 },
                    });
                }
            }
        }
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let sc = Vector3::from(SPHERE_CENTER);
    for i in 0..SPHERE_POINTS {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / SPHERE_POINTS as f64;
        let r = (1.0 - y * y).sqrt();
        let t = golden * i as f64;
        let dir = Vector3::new(r * t.cos(), y, r * t.sin());
        let lat = 0.5 * (y + 1.0);
        out.push(Gaussian {
            position: sc + dir * SPHERE_RADIUS,
            rotation: normalize_quat(&[1.0, 0.0, 0.0, 0.0]),
            log_scale: Vector3::repeat(0.12f64.ln()),
            opacity_logit: 2.5,
            color: Vector3::new(0.2 + 0.7 * lat, 0.3, 0.9 - 0.6 * lat),
        });
    }
    GaussianCloud::new(out)
}

/// `count` jittered copies of `source`, cycling through it, as a stand-in
/// for an unconstrained pretrained reconstruction.
pub fn perturbed_copies(source: &GaussianCloud, count: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = Normal::new(0.0, 0.03).expect("valid std");
    let log = Normal::new(0.0, 0.15).expect("valid std");
    (0..count)
        .map(|i| {
            let mut g = source.gaussians[i % source.len()];
            g.position += Vector3::from_fn(|_, _| pos.sample(&mut rng));
            g.log_scale += Vector3::from_fn(|_, _| log.sample(&mut rng));
            g.opacity_logit += rng.random_range(-1.0..0.0);
            g.color = g.color.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
            g
        })
        .collect()
}

/// Ground-truth views rendered from `cloud`.
pub fn render_views(cloud: &GaussianCloud, cameras: &[Camera]) -> Vec<TrainingView> {
    cameras
        .iter()
        .map(|c| TrainingView::from_render(c.clone(), &render(cloud, c)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoSpec {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub pretrained: usize,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            views: 16,
            width: 64,
            height: 64,
            pretrained: 1000,
            seed: 0,
        }
    }
}

pub struct Demo {
    pub source: GaussianCloud,
    pub pretrained: GaussianCloud,
    pub views: Vec<TrainingView>,
}

/// Source scene, pretrained cloud and ground-truth views.
pub fn build_demo(spec: &DemoSpec) -> Result<Demo> {
    let source = demo_scene();
    let fx = 0.9 * spec.width as f64;
    let cams = orbit_cameras(spec.views, 4.0, Vector3::zeros(), fx, spec.width, spec.height)?;
    let views = render_views(&source, &cams);
    let pretrained = perturbed_copies(&source, spec.pretrained, spec.seed);
    Ok(Demo {
        source,
        pretrained,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_quaternion_round_trip() {
        let (u, v, n) = (Vector3::y(), Vector3::z(), Vector3::x());
        let r = crate::gaussian::rotation_matrix(&quat_from_basis(u, v, n));
        assert!((r - Matrix3::from_columns(&[u, v, n])).abs().max() < 1e-12);
    }

    #[test]
    fn demo_is_visible_and_deterministic() {
        let d = build_demo(&DemoSpec::default()).unwrap();
        assert_eq!(d.source.len(), 6 * 16 + SPHERE_POINTS);
        assert_eq!(d.pretrained.len(), 1000);
        assert_eq!(d.views.len(), 16);
        for v in &d.views {
            let covered = v.alpha.as_ref().unwrap().iter().filter(|a| **a > 0.5).count();
            assert!(covered > 300 && covered < 3000, "{covered}");
        }
        let again = build_demo(&DemoSpec::default()).unwrap();
        assert_eq!(again.pretrained, d.pretrained);
        assert_eq!(again.views, d.views);
    }
}
