//! Gaussian primitives, their activations, and the 14-channel feature layout.
//!
//! A [`Gaussian`] stores raw optimisable parameters (log scale, opacity logit,
//! an unnormalised quaternion). Everything downstream that needs activated
//! values goes through the accessors here so the conventions live in one place.

use std::ops::Range;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Number of channels in a flattened Gaussian.
pub const CHANNELS: usize = 14;

/// Index ranges shared by the raw parameter vector and the feature vector.
pub mod layout {
    use std::ops::Range;

    pub const POSITION: Range<usize> = 0..3;
    pub const SCALE: Range<usize> = 3..6;
    pub const ROTATION: Range<usize> = 6..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..14;
}

pub const MIN_OPACITY: f64 = 1e-6;
pub const MIN_SCALE: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Quaternion in `(w, x, y, z)` order.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Normalise `q`, falling back to the identity for a zero quaternion.
pub fn normalize_quat(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n < 1e-12 || !n.is_finite() {
        IDENTITY_QUAT
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient on the rotation matrix back to the unit quaternion it was
/// built from.
pub fn rotation_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Pull a gradient on `q / |q|` back to the raw quaternion `q`.
pub fn normalize_quat_vjp(raw: &Quat, g_unit: &Quat) -> Quat {
    let n = quat_norm(raw);
    if n < 1e-12 {
        return [0.0; 4];
    }
    let u = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let d: f64 = (0..4).map(|i| u[i] * g_unit[i]).sum();
    [
        (g_unit[0] - u[0] * d) / n,
        (g_unit[1] - u[1] * d) / n,
        (g_unit[2] - u[2] * d) / n,
        (g_unit[3] - u[3] * d) / n,
    ]
}

/// World covariance `R diag(s²) Rᵀ`.
pub fn covariance_from(rotation: &Quat, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if rotation.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite rotation or scale"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
    }
    let r = rotation_matrix(&normalize_quat(rotation));
    let m = r * Matrix3::from_diagonal(scale);
    let cov = m * m.transpose();
    // exact symmetry
    Ok((cov + cov.transpose()) * 0.5)
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn shortest_axis(scale: &Vector3<f64>) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if scale[k] < scale[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`, kept at unit norm by the optimiser.
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn new(
        position: Vector3<f64>,
        rotation: Quat,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        let opacity = opacity.clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
        Ok(Self {
            position,
            rotation: normalize_quat(&rotation),
            log_scale: scale.map(f64::ln),
            opacity_logit: logit(opacity),
            color,
        })
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> Quat {
        normalize_quat(&self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.unit_rotation())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from(&self.rotation, &self.scale())
    }

    pub fn max_scale(&self) -> f64 {
        self.scale().max()
    }

    /// Raw parameters in the shared 14-slot layout.
    pub fn to_raw(&self) -> [f64; CHANNELS] {
        let mut r = [0.0; CHANNELS];
        r[layout::POSITION].copy_from_slice(self.position.as_slice());
        r[layout::SCALE].copy_from_slice(self.log_scale.as_slice());
        r[layout::ROTATION].copy_from_slice(&self.rotation);
        r[layout::OPACITY] = self.opacity_logit;
        r[layout::COLOR].copy_from_slice(self.color.as_slice());
        r
    }

    pub fn from_raw(r: &[f64; CHANNELS]) -> Self {
        Self {
            position: Vector3::from_column_slice(&r[layout::POSITION]),
            rotation: [r[6], r[7], r[8], r[9]],
            log_scale: Vector3::from_column_slice(&r[layout::SCALE]),
            opacity_logit: r[layout::OPACITY],
            color: Vector3::from_column_slice(&r[layout::COLOR]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_raw().iter().all(|v| v.is_finite())
    }
}

/// World-space normal of `g`: its shortest covariance axis, oriented so that
/// `dot(normal, view_dir) <= 0`.
pub fn shortest_axis_normal(g: &Gaussian, view_dir: &Vector3<f64>) -> Vector3<f64> {
    let (n, _, _) = oriented_normal(g, view_dir);
    n
}

/// Normal plus the axis index and sign used, for the backward pass.
pub(crate) fn oriented_normal(g: &Gaussian, view_dir: &Vector3<f64>) -> (Vector3<f64>, usize, f64) {
    let axis = shortest_axis(&g.log_scale);
    let col: Vector3<f64> = g.rotation_matrix().column(axis).into();
    let sign = if col.dot(view_dir) > 0.0 { -1.0 } else { 1.0 };
    (col * sign, axis, sign)
}

/// Activated parameters `[position, scale, rotation, opacity, color]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features14(pub [f64; CHANNELS]);

impl Features14 {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn range(&self, r: Range<usize>) -> &[f64] {
        &self.0[r]
    }
}

pub fn flatten(g: &Gaussian) -> Features14 {
    let mut f = [0.0; CHANNELS];
    f[layout::POSITION].copy_from_slice(g.position.as_slice());
    f[layout::SCALE].copy_from_slice(g.scale().as_slice());
    f[layout::ROTATION].copy_from_slice(&g.unit_rotation());
    f[layout::OPACITY] = g.opacity();
    f[layout::COLOR].copy_from_slice(g.color.as_slice());
    Features14(f)
}

/// Strict inverse of [`flatten`]. Opacity must lie in `[0, 1]` (it is clamped
/// into `[1e-6, 1 - 1e-6]` before the logit) and scales must be positive. A
/// zero rotation falls back to the identity.
pub fn unflatten(f: &Features14) -> Result<Gaussian> {
    if f.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature vector"));
    }
    let opacity = f.0[layout::OPACITY];
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
    }
    let scale = Vector3::from_column_slice(f.range(layout::SCALE));
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
    }
    let r = f.range(layout::ROTATION);
    Ok(Gaussian {
        position: Vector3::from_column_slice(f.range(layout::POSITION)),
        rotation: normalize_quat(&[r[0], r[1], r[2], r[3]]),
        log_scale: scale.map(f64::ln),
        opacity_logit: logit(opacity.clamp(MIN_OPACITY, 1.0 - MIN_OPACITY)),
        color: Vector3::from_column_slice(f.range(layout::COLOR)),
    })
}

/// Lenient decoding used for generated grids: scales are floored at
/// [`MIN_SCALE`], opacity and color are clamped into range. Only non-finite
/// input is rejected.
pub fn unflatten_clamped(f: &Features14) -> Result<Gaussian> {
    if f.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let r = f.range(layout::ROTATION);
    let scale = Vector3::from_column_slice(f.range(layout::SCALE)).map(|s| s.max(MIN_SCALE));
    let opacity = f.0[layout::OPACITY].clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
    Ok(Gaussian {
        position: Vector3::from_column_slice(f.range(layout::POSITION)),
        rotation: normalize_quat(&[r[0], r[1], r[2], r[3]]),
        log_scale: scale.map(f64::ln),
        opacity_logit: logit(opacity),
        color: Vector3::from_column_slice(f.range(layout::COLOR)).map(|c| c.clamp(0.0, 1.0)),
    })
}

/// Chain a raw-parameter gradient of `unflatten_clamped(f)` back to `f`.
/// Clamped entries receive zero gradient.
pub fn unflatten_clamped_vjp(f: &Features14, g: &Gaussian, raw_grad: &[f64; CHANNELS]) -> [f64; CHANNELS] {
    let mut out = [0.0; CHANNELS];
    for k in layout::POSITION {
        out[k] = raw_grad[k];
    }
    for k in layout::SCALE {
        let s = f.0[k];
        if s > MIN_SCALE {
            out[k] = raw_grad[k] / s;
        }
    }
    // The stored rotation is the normalised feature quaternion, so the raw
    // gradient is already tangent; only the 1/|q| factor remains.
    let r = f.range(layout::ROTATION);
    let qn = quat_norm(&[r[0], r[1], r[2], r[3]]);
    if qn >= 1e-12 {
        let unit = g.rotation;
        let d: f64 = (0..4).map(|i| unit[i] * raw_grad[6 + i]).sum();
        for i in 0..4 {
            out[6 + i] = (raw_grad[6 + i] - unit[i] * d) / qn;
        }
    }
    let o = f.0[layout::OPACITY];
    if o > MIN_OPACITY && o < 1.0 - MIN_OPACITY {
        out[layout::OPACITY] = raw_grad[layout::OPACITY] / (o * (1.0 - o));
    }
    for k in layout::COLOR {
        let c = f.0[k];
        if (0.0..=1.0).contains(&c) {
            out[k] = raw_grad[k];
        }
    }
    out
}

/// Ordered set of Gaussians; the count is the vector length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Axis-aligned bounding box of the centres.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.position), hi.sup(&g.position))
        }))
    }

    /// Diagonal of the centre bounding box.
    pub fn extent(&self) -> f64 {
        self.bounds().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.gaussians.iter().position(|g| !g.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("gaussian {i}"))),
            None => Ok(()),
        }
    }
}

impl FromIterator<Gaussian> for GaussianCloud {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}
