//! Differentiable rasterisation of color, depth and normal maps.
//!
//! Every pixel is evaluated exactly against every Gaussian whose screen-space
//! footprint can reach it. Footprints are binned into 16x16 pixel tiles so
//! tiles can be shaded in parallel; the binning is conservative, so the result
//! is the same as a brute-force loop over all Gaussians.

mod backward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

pub use backward::{render_backward, ParamGradients, RenderGrads};

use crate::camera::Camera;
use crate::exec;
use crate::gaussian::{oriented_normal, Gaussian, GaussianCloud};

pub const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub znear: f64,
    /// Added to the screen-space covariance diagonal, in pixels².
    pub dilation: f64,
    /// Contributions with `α′` below this are skipped.
    pub alpha_cutoff: f64,
    /// Blending stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Screen covariances with a larger condition number are skipped.
    pub max_condition: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            znear: 0.01,
            dilation: 0.3,
            alpha_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            max_condition: 1e12,
        }
    }
}

/// A Gaussian projected into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub camera_pos: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov_camera: Matrix3<f64>,
}

/// Outcome of projecting one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Projection {
    Visible(Projected),
    /// Behind the near plane.
    Culled,
    /// Screen covariance too badly conditioned to invert.
    Singular,
}

impl Projection {
    pub fn visible(&self) -> Option<&Projected> {
        match self {
            Projection::Visible(p) => Some(p),
            _ => None,
        }
    }
}

pub fn project(g: &Gaussian, cam: &Camera, cfg: &RasterConfig) -> Projection {
    let t = cam.to_camera(&g.position);
    if !(t.z > cfg.znear) {
        return Projection::Culled;
    }
    let (x, y, z) = (t.x, t.y, t.z);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let cov_world = match g.covariance() {
        Ok(c) => c,
        Err(_) => return Projection::Singular,
    };
    let cov_camera = cam.rotation * cov_world * cam.rotation.transpose();
    let mut cov2d = jacobian * cov_camera * jacobian.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += cfg.dilation;
    cov2d[(1, 1)] += cfg.dilation;

    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lmax, lmin) = (mid + rad, mid - rad);
    if !(lmin > 0.0) || !(lmax / lmin <= cfg.max_condition) {
        return Projection::Singular;
    }
    let det = a * c - b * b;
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);
    Projection::Visible(Projected {
        mean2d: Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov2d,
        conic,
        depth: z,
        camera_pos: t,
        jacobian,
        cov_camera,
    })
}

/// Per-Gaussian data needed by the blending loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat {
    pub proj: Projected,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub normal_axis: usize,
    pub normal_sign: f64,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]`.
    pub rect: (usize, usize, usize, usize),
}

pub(crate) struct Prepared {
    pub splats: Vec<Option<Splat>>,
    pub culled: usize,
    /// Per tile, indices into `splats` sorted front to back.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

fn splat_rect(p: &Projected, opacity: f64, cam: &Camera, cfg: &RasterConfig) -> Option<(usize, usize, usize, usize)> {
    if opacity < cfg.alpha_cutoff {
        return None;
    }
    // α′ >= cutoff  <=>  dᵀ Σ⁻¹ d <= 2 ln(opacity / cutoff)
    let q_max = 2.0 * (opacity / cfg.alpha_cutoff).ln();
    let hx = (q_max * p.cov2d[(0, 0)]).sqrt() * (1.0 + 1e-9) + 1e-9;
    let hy = (q_max * p.cov2d[(1, 1)]).sqrt() * (1.0 + 1e-9) + 1e-9;
    // pixel centres sit at i + 0.5
    let x0 = (p.mean2d.x - hx - 0.5).ceil();
    let x1 = (p.mean2d.x + hx - 0.5).floor();
    let y0 = (p.mean2d.y - hy - 0.5).ceil();
    let y1 = (p.mean2d.y + hy - 0.5).floor();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= w - 1.0 && y0 <= h - 1.0) {
        return None;
    }
    Some((
        x0.max(0.0) as usize,
        x1.min(w - 1.0) as usize,
        y0.max(0.0) as usize,
        y1.min(h - 1.0) as usize,
    ))
}

pub(crate) fn prepare(cloud: &GaussianCloud, cam: &Camera, cfg: &RasterConfig) -> Prepared {
    let center = cam.center();
    let projections = exec::map_slice(&cloud.gaussians, |g| project(g, cam, cfg));
    let culled = projections.iter().filter(|p| matches!(p, Projection::Culled)).count();
    let splats: Vec<Option<Splat>> = cloud
        .gaussians
        .iter()
        .zip(&projections)
        .map(|(g, proj)| {
            let proj = *proj.visible()?;
            let opacity = g.opacity();
            let rect = splat_rect(&proj, opacity, cam, cfg)?;
            let view = (g.position - center).normalize();
            let (normal, normal_axis, normal_sign) = oriented_normal(g, &view);
            Some(Splat {
                proj,
                opacity,
                color: g.color,
                normal,
                normal_axis,
                normal_sign,
                rect,
            })
        })
        .collect();

    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| splats[i as usize].is_some())
        .collect();
    // stable: equal depths keep index order
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().map_or(0.0, |s| s.proj.depth);
        let db = splats[b as usize].as_ref().map_or(0.0, |s| s.proj.depth);
        da.total_cmp(&db)
    });

    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let s = splats[i as usize].as_ref().expect("filtered above");
        let (x0, x1, y0, y1) = s.rect;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Prepared {
        splats,
        culled,
        tiles,
        tiles_x,
    }
}

/// One entry of a pixel's blend list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Position in the tile list.
    pub slot: usize,
    pub alpha: f64,
    /// Transmittance before this entry.
    pub transmittance: f64,
    /// Gaussian falloff `exp(-q/2)`.
    pub falloff: f64,
    pub offset: Vector2<f64>,
}

/// Walk the blend list of pixel `(px, py)` front to back.
pub(crate) fn blend_pixel(
    px: usize,
    py: usize,
    list: &[u32],
    splats: &[Option<Splat>],
    cfg: &RasterConfig,
    mut visit: impl FnMut(&Splat, Contribution),
) -> f64 {
    let pix = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    for (slot, &i) in list.iter().enumerate() {
        let s = splats[i as usize].as_ref().expect("binned splat");
        let (x0, x1, y0, y1) = s.rect;
        if px < x0 || px > x1 || py < y0 || py > y1 {
            continue;
        }
        let d = pix - s.proj.mean2d;
        let q = (d.transpose() * s.proj.conic * d)[(0, 0)];
        let falloff = (-0.5 * q).exp();
        let alpha = s.opacity * falloff;
        if alpha < cfg.alpha_cutoff {
            continue;
        }
        visit(
            s,
            Contribution {
                slot,
                alpha,
                transmittance: t,
                falloff,
                offset: d,
            },
        );
        t *= 1.0 - alpha;
        if t < cfg.min_transmittance {
            break;
        }
    }
    t
}

/// Rendered maps, row-major with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Gaussians behind the near plane.
    pub culled: usize,
}

impl RenderOutput {
    pub fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            normal: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            culled: 0,
        }
    }
}

pub(crate) fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let xs = tx * TILE..((tx + 1) * TILE).min(cam.width);
    let ys = ty * TILE..((ty + 1) * TILE).min(cam.height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

pub fn render(cloud: &GaussianCloud, cam: &Camera) -> RenderOutput {
    render_with(cloud, cam, &RasterConfig::default())
}

pub fn render_with(cloud: &GaussianCloud, cam: &Camera, cfg: &RasterConfig) -> RenderOutput {
    let prep = prepare(cloud, cam, cfg);
    let tile_results = exec::map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        tile_pixels(tile, prep.tiles_x, cam)
            .map(|(x, y)| {
                let mut acc = [0.0f64; 8];
                let t_final = blend_pixel(x, y, list, &prep.splats, cfg, |s, c| {
                    let w = c.alpha * c.transmittance;
                    for k in 0..3 {
                        acc[k] += w * s.color[k];
                        acc[4 + k] += w * s.normal[k];
                    }
                    acc[3] += w * s.proj.depth;
                });
                acc[7] = 1.0 - t_final;
                (x, y, acc)
            })
            .collect::<Vec<_>>()
    });

    let mut out = RenderOutput::blank(cam.width, cam.height);
    out.culled = prep.culled;
    for (x, y, acc) in tile_results.into_iter().flatten() {
        let p = y * cam.width + x;
        out.color[3 * p..3 * p + 3].copy_from_slice(&acc[0..3]);
        out.depth[p] = acc[3];
        out.normal[3 * p..3 * p + 3].copy_from_slice(&acc[4..7]);
        out.alpha[p] = acc[7];
    }
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gaussian::{logit, IDENTITY_QUAT};

    fn axis_camera(w: usize, h: usize, f: f64, c: f64) -> Camera {
        Camera::new(f, f, c, c, w, h, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    fn gaussian(pos: [f64; 3], scale: f64, opacity_logit: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            position: Vector3::from(pos),
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit,
            color: Vector3::from(color),
        }
    }

    #[test]
    fn projection_on_axis() {
        let cam = axis_camera(64, 64, 100.0, 32.0);
        let g = gaussian([0.0, 0.0, 1.0], 0.1, 0.0, [1.0; 3]);
        let p = *project(&g, &cam, &RasterConfig::default()).visible().unwrap();
        assert_relative_eq!(p.mean2d, Vector2::new(32.0, 32.0), epsilon = 1e-12);
        assert_relative_eq!(p.depth, 1.0);
    }

    #[test]
    fn projection_covariance_scales_with_depth() {
        let cam = axis_camera(64, 64, 100.0, 32.0);
        let g = gaussian([0.0, 0.0, 2.0], 1.0, 0.0, [1.0; 3]);
        let p = *project(&g, &cam, &RasterConfig::default()).visible().unwrap();
        assert_relative_eq!(p.cov2d, Matrix2::new(2500.3, 0.0, 0.0, 2500.3), epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(64, 64, 100.0, 32.0);
        let g = gaussian([0.0, 0.0, -1.0], 0.1, 0.0, [1.0; 3]);
        assert_eq!(project(&g, &cam, &RasterConfig::default()), Projection::Culled);
        let out = render(&GaussianCloud::new(vec![g]), &cam);
        assert_eq!(out.culled, 1);
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn opaque_gaussian_sets_pixel_color() {
        let cam = axis_camera(1, 1, 10.0, 0.5);
        let g = gaussian([0.0, 0.0, 1.0], 0.5, 40.0, [0.8, 0.2, 0.1]);
        let out = render(&GaussianCloud::new(vec![g]), &cam);
        assert_relative_eq!(out.color[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(out.color[1], 0.2, epsilon = 1e-12);
        assert_relative_eq!(out.color[2], 0.1, epsilon = 1e-12);
        assert_relative_eq!(out.alpha[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.depth[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_half_transparent_layers() {
        let cam = axis_camera(1, 1, 10.0, 0.5);
        let front = gaussian([0.0, 0.0, 1.0], 0.5, logit(0.5), [1.0; 3]);
        let back = gaussian([0.0, 0.0, 2.0], 0.5, logit(0.5), [0.0; 3]);
        let out = render(&GaussianCloud::new(vec![back, front]), &cam);
        assert_relative_eq!(out.color[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.alpha[0], 0.75, epsilon = 1e-12);
        // depth: 0.5*1 + 0.25*2
        assert_relative_eq!(out.depth[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_cloud_is_background() {
        let cam = axis_camera(20, 10, 10.0, 5.0);
        let out = render(&GaussianCloud::default(), &cam);
        assert_eq!(out, RenderOutput::blank(20, 10));
    }

    fn random_scene(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Gaussian {
                position: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)),
                rotation: crate::gaussian::normalize_quat(&[
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]),
                log_scale: Vector3::new(rng.random_range(-3.0..-1.0), rng.random_range(-3.0..-1.0), rng.random_range(-3.0..-1.0)),
                opacity_logit: rng.random_range(-2.0..3.0),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_without_tiles() {
        // a plain loop over all Gaussians sorted by depth
        let cloud = random_scene(3, 60);
        let cam = axis_camera(40, 24, 30.0, 20.0);
        let cfg = RasterConfig::default();
        let out = render(&cloud, &cam);
        let mut projected: Vec<(f64, usize, Projected)> = cloud
            .iter()
            .enumerate()
            .filter_map(|(i, g)| project(g, &cam, &cfg).visible().map(|p| (p.depth, i, *p)))
            .collect();
        projected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for y in 0..cam.height {
            for x in 0..cam.width {
                let pix = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let (mut t, mut c) = (1.0, Vector3::zeros());
                for (_, i, p) in &projected {
                    let d = pix - p.mean2d;
                    let a = cloud.gaussians[*i].opacity() * (-0.5 * (d.transpose() * p.conic * d)[(0, 0)]).exp();
                    if a < cfg.alpha_cutoff {
                        continue;
                    }
                    c += cloud.gaussians[*i].color * a * t;
                    t *= 1.0 - a;
                    if t < cfg.min_transmittance {
                        break;
                    }
                }
                let k = 3 * (y * cam.width + x);
                for ch in 0..3 {
                    assert_relative_eq!(out.color[k + ch], c[ch], epsilon = 1e-12);
                }
                assert_relative_eq!(out.alpha[y * cam.width + x], 1.0 - t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ordering_invariant_and_in_range() {
        let cloud = random_scene(11, 40);
        let cam = axis_camera(32, 32, 30.0, 16.0);
        let base = render(&cloud, &cam);
        assert!(base.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(base.color.iter().all(|&c| (0.0..=1.0).contains(&c)));
        assert!(base.depth.iter().all(|&d| d >= 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut shuffled = cloud.clone();
            shuffled.gaussians.shuffle(&mut rng);
            assert_eq!(render(&shuffled, &cam), base);
        }
    }
}
