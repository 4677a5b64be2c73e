use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{blend_pixel, prepare, tile_pixels, Contribution, RasterConfig, Splat};
use crate::camera::Camera;
use crate::error::{ensure_finite, Error, Result};
use crate::exec;
use crate::gaussian::{layout, normalize_quat, normalize_quat_vjp, rotation_matrix_vjp, GaussianCloud, CHANNELS};

/// Upstream gradients of a scalar loss with respect to each rendered map.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            normal: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.color.len() != 3 * n || self.depth.len() != n || self.normal.len() != 3 * n || self.alpha.len() != n {
            return Err(Error::dims(format!("upstream gradients do not match a {n}-pixel image")));
        }
        ensure_finite(&self.color, "color gradient")?;
        ensure_finite(&self.depth, "depth gradient")?;
        ensure_finite(&self.normal, "normal gradient")?;
        ensure_finite(&self.alpha, "alpha gradient")
    }
}

/// Gradients with respect to the raw parameters of every Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    /// Raw-parameter gradients in the shared 14-slot layout.
    pub raw: Vec<[f64; CHANNELS]>,
    /// ‖∂L/∂mean2d‖ in NDC units, the densification signal.
    pub pos_grad_norm: Vec<f64>,
    /// Whether the Gaussian touched at least one pixel.
    pub visible: Vec<bool>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            raw: vec![[0.0; CHANNELS]; n],
            pos_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.raw[i][layout::POSITION])
    }
}

/// Screen-space gradient accumulator for one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: [f64; 2],
    /// Over the conic entries `a`, `b`, `c` of `a dx² + 2b dx dy + c dy²`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    touched: bool,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
            self.normal[k] += o.normal[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
        self.touched |= o.touched;
    }
}

fn pixel_backward(
    contribs: &[(Splat, Contribution)],
    upstream: &[f64; 8],
    mut emit: impl FnMut(usize, ScreenGrad),
) {
    // suffix[c] = Σ_{k>i} f_k α_k Π_{i<j<k} (1 - α_j), built back to front
    let mut suffix = [0.0f64; 8];
    for (s, c) in contribs.iter().rev() {
        let f = [
            s.color[0],
            s.color[1],
            s.color[2],
            s.proj.depth,
            s.normal[0],
            s.normal[1],
            s.normal[2],
            1.0,
        ];
        let w = c.alpha * c.transmittance;
        let mut d_alpha = 0.0;
        for k in 0..8 {
            d_alpha += upstream[k] * (f[k] - suffix[k]);
        }
        d_alpha *= c.transmittance;
        for k in 0..8 {
            suffix[k] = c.alpha * f[k] + (1.0 - c.alpha) * suffix[k];
        }

        // α = opacity · exp(-q/2)
        let d_q = -0.5 * c.alpha * d_alpha;
        let (dx, dy) = (c.offset.x, c.offset.y);
        let m = &s.proj.conic;
        let g = ScreenGrad {
            mean2d: [
                -d_q * 2.0 * (m[(0, 0)] * dx + m[(0, 1)] * dy),
                -d_q * 2.0 * (m[(0, 1)] * dx + m[(1, 1)] * dy),
            ],
            conic: [d_q * dx * dx, d_q * 2.0 * dx * dy, d_q * dy * dy],
            opacity: d_alpha * c.falloff,
            color: [w * upstream[0], w * upstream[1], w * upstream[2]],
            depth: w * upstream[3],
            normal: [w * upstream[4], w * upstream[5], w * upstream[6]],
            touched: true,
        };
        emit(c.slot, g);
    }
}

/// Analytic gradients of `L` given `∂L/∂{color, depth, normal, alpha}`.
///
/// The blend lists are recomputed from the cloud, so no state from the
/// forward pass is required. Per-tile partial sums are merged in tile order,
/// which makes the result independent of the thread count.
pub fn render_backward(cloud: &GaussianCloud, cam: &Camera, upstream: &RenderGrads) -> Result<ParamGradients> {
    render_backward_with(cloud, cam, upstream, &RasterConfig::default())
}

pub fn render_backward_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    upstream: &RenderGrads,
    cfg: &RasterConfig,
) -> Result<ParamGradients> {
    upstream.check(cam.pixel_count())?;
    let prep = prepare(cloud, cam, cfg);

    let per_tile = exec::map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        let mut local = vec![ScreenGrad::default(); list.len()];
        let mut contribs: Vec<(Splat, Contribution)> = Vec::new();
        for (x, y) in tile_pixels(tile, prep.tiles_x, cam) {
            let p = y * cam.width + x;
            let up = [
                upstream.color[3 * p],
                upstream.color[3 * p + 1],
                upstream.color[3 * p + 2],
                upstream.depth[p],
                upstream.normal[3 * p],
                upstream.normal[3 * p + 1],
                upstream.normal[3 * p + 2],
                upstream.alpha[p],
            ];
            contribs.clear();
            blend_pixel(x, y, list, &prep.splats, cfg, |s, c| contribs.push((*s, c)));
            pixel_backward(&contribs, &up, |slot, g| local[slot].add(&g));
        }
        local
    });

    let n = cloud.len();
    let mut screen = vec![ScreenGrad::default(); n];
    for (tile, local) in per_tile.iter().enumerate() {
        for (slot, g) in local.iter().enumerate() {
            screen[prep.tiles[tile][slot] as usize].add(g);
        }
    }

    let chained = exec::map_range(n, |i| match &prep.splats[i] {
        Some(s) if screen[i].touched => chain_to_params(cloud, i, s, &screen[i], cam),
        _ => ([0.0; CHANNELS], 0.0),
    });

    let mut out = ParamGradients::zeros(n);
    for (i, (raw, norm)) in chained.into_iter().enumerate() {
        out.raw[i] = raw;
        out.pos_grad_norm[i] = norm;
        out.visible[i] = screen[i].touched;
    }
    Ok(out)
}

fn chain_to_params(
    cloud: &GaussianCloud,
    i: usize,
    s: &Splat,
    sg: &ScreenGrad,
    cam: &Camera,
) -> ([f64; CHANNELS], f64) {
    let g = &cloud.gaussians[i];
    let mut raw = [0.0; CHANNELS];

    raw[layout::COLOR].copy_from_slice(&sg.color);
    raw[layout::OPACITY] = sg.opacity * s.opacity * (1.0 - s.opacity);

    // conic = cov2d⁻¹  =>  dL/dcov = -conic · dL/dconic · conic
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(s.proj.conic * g_conic * s.proj.conic);

    // cov2d = J Σc Jᵀ + dilation
    let j = &s.proj.jacobian;
    let g_cov_cam: Matrix3<f64> = j.transpose() * g_cov2d * j;
    let g_j: Matrix2x3<f64> = 2.0 * g_cov2d * j * s.proj.cov_camera;
    // Σc = W Σ Wᵀ
    let g_cov_world = cam.rotation.transpose() * g_cov_cam * cam.rotation;

    // Σ = M Mᵀ with M = R S
    let unit = normalize_quat(&g.rotation);
    let r = crate::gaussian::rotation_matrix(&unit);
    let scale = g.scale();
    let m = r * Matrix3::from_diagonal(&scale);
    let g_m = 2.0 * g_cov_world * m;
    let mut g_r = g_m * Matrix3::from_diagonal(&scale);
    for k in 0..3 {
        let gs: f64 = (0..3).map(|row| g_m[(row, k)] * r[(row, k)]).sum();
        raw[layout::SCALE.start + k] = gs * scale[k];
    }
    // normal = sign · R[:, axis]
    for row in 0..3 {
        g_r[(row, s.normal_axis)] += s.normal_sign * sg.normal[row];
    }
    let g_unit = rotation_matrix_vjp(&unit, &g_r);
    let g_q = normalize_quat_vjp(&g.rotation, &g_unit);
    raw[layout::ROTATION].copy_from_slice(&g_q);

    // mean2d and J both depend on the camera-space position
    let t = s.proj.camera_pos;
    let (x, y, z) = (t.x, t.y, t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let gu = sg.mean2d[0];
    let gv = sg.mean2d[1];
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_t = Vector3::new(gu * fx / z, gv * fy / z, -gu * fx * x / z2 - gv * fy * y / z2);
    g_t.x += g_j[(0, 2)] * (-fx / z2);
    g_t.y += g_j[(1, 2)] * (-fy / z2);
    g_t.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3);
    g_t.z += sg.depth;
    let g_p = cam.rotation.transpose() * g_t;
    raw[layout::POSITION].copy_from_slice(g_p.as_slice());

    let ndc = Vector2::new(gu * cam.width as f64 * 0.5, gv * cam.height as f64 * 0.5);
    (raw, ndc.norm())
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    use super::*;
    use crate::gaussian::{Gaussian, IDENTITY_QUAT};
    use crate::raster::render;

    fn cam1() -> Camera {
        Camera::new(10.0, 10.0, 0.5, 0.5, 1, 1, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cloud = GaussianCloud::new(vec![Gaussian {
            position: Vector3::new(0.0, 0.0, 2.0),
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::repeat(-1.0),
            opacity_logit: 0.3,
            color: Vector3::new(0.2, 0.5, 0.9),
        }]);
        let cam = Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8, Matrix3::identity(), Vector3::zeros()).unwrap();
        let g = render_backward(&cloud, &cam, &RenderGrads::zeros(8, 8)).unwrap();
        assert!(g.raw[0].iter().all(|&v| v == 0.0));
        assert_eq!(g.pos_grad_norm[0], 0.0);
    }

    #[test]
    fn color_gradient_is_blend_weight() {
        let cloud = GaussianCloud::new(vec![Gaussian {
            position: Vector3::new(0.01, -0.02, 1.0),
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::repeat(-2.0),
            opacity_logit: 0.7,
            color: Vector3::new(0.2, 0.5, 0.9),
        }]);
        let cam = cam1();
        let out = render(&cloud, &cam);
        let mut up = RenderGrads::zeros(1, 1);
        up.color[0] = 1.0;
        let g = render_backward(&cloud, &cam, &up).unwrap();
        assert_relative_eq!(g.raw[0][layout::COLOR.start], out.alpha[0], epsilon = 1e-15);
        assert_eq!(g.raw[0][layout::COLOR.start + 1], 0.0);
    }

    #[test]
    fn rejects_non_finite_upstream() {
        let mut up = RenderGrads::zeros(1, 1);
        up.depth[0] = f64::NAN;
        assert!(render_backward(&GaussianCloud::default(), &cam1(), &up).is_err());
        let up = RenderGrads::zeros(2, 1);
        assert!(render_backward(&GaussianCloud::default(), &cam1(), &up).is_err());
    }
}
