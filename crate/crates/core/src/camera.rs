use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` accepted for camera rotations.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole camera with a rigid world-to-camera transform. Camera space looks
/// down `+z`, with `+x` right and `+y` down in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite camera parameter"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:.3e}, tolerance {ORTHONORMAL_TOL:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::invalid("rotation has negative determinant"));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`, with `up` hinting the image's
    /// upward direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        if !right.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Row-major 4x4 world-to-camera matrix.
    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_world_to_camera(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        m: &Matrix4<f64>,
    ) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "world_to_camera bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        Self::new(
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}
