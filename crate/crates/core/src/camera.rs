//! Rays and the pinhole camera.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_quat, quat_to_matrix};
use crate::{Error, Result, Vec3};

/// Parametric ray `o + t·d` over `[t_near, t_far]` with unit `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalises `dir`. A zero or non-finite direction is rejected.
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let n = dir.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidParameter("ray direction must be nonzero".into()));
        }
        Ok(Self { origin, dir: dir / n, t_near, t_far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Pinhole camera. Camera-frame axes: `+x` right, `+y` down, `+z` forward;
/// `rotation` maps camera-frame directions to world directions. `focal` is
/// in pixels and the principal point is the image center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub center: [f64; 3],
    /// Scalar-first `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(center: Vec3, rotation: [f64; 4], focal: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self { center: center.into(), rotation: normalize_quat(rotation)?, focal, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` looking at `target`, with `up` roughly opposite the
    /// image `+y` axis.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - center).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidParameter("up vector is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self::new(center, [q.w, q.i, q.j, q.k], focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::InvalidParameter(format!("camera focal {} must be > 0", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera width and height must be >= 1".into()));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("camera center must be finite".into()));
        }
        normalize_quat(self.rotation)?;
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation_matrix().column(2).into()
    }

    /// Unit direction through the center of pixel `(px, py)`.
    pub fn pixel_dir(&self, px: usize, py: usize) -> Vec3 {
        let cx = self.width as f64 * 0.5;
        let cy = self.height as f64 * 0.5;
        let local = Vec3::new((px as f64 + 0.5 - cx) / self.focal, (py as f64 + 0.5 - cy) / self.focal, 1.0);
        (self.rotation_matrix() * local).normalize()
    }

    /// Projects a world point to continuous pixel coordinates; `None` behind
    /// the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let local = self.rotation_matrix().tr_mul(&(p - self.origin()));
        if local.z <= 0.0 {
            return None;
        }
        Some((
            local.x / local.z * self.focal + self.width as f64 * 0.5,
            local.y / local.z * self.focal + self.height as f64 * 0.5,
        ))
    }

    pub fn ray(&self, px: usize, py: usize, t_near: f64, t_far: f64) -> Ray {
        Ray { origin: self.origin(), dir: self.pixel_dir(px, py), t_near, t_far }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_forward() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), -Vec3::y(), 32.0, 32, 32).unwrap();
        assert!((cam.forward() - Vec3::z()).amax() < 1e-12);
        let (u, v) = cam.project(&Vec3::zeros()).unwrap();
        assert!((u - 16.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_dir_roundtrips_through_projection() {
        let cam = Camera::look_at(Vec3::new(1.0, 2.0, -3.0), Vec3::new(0.2, 0.0, 0.5), Vec3::y(), 20.0, 24, 16).unwrap();
        let d = cam.pixel_dir(5, 11);
        let (u, v) = cam.project(&(cam.origin() + d * 3.0)).unwrap();
        assert!((u - 5.5).abs() < 1e-9 && (v - 11.5).abs() < 1e-9);
    }

    #[test]
    fn invalid_cameras_rejected() {
        assert!(Camera::new(Vec3::zeros(), [1.0, 0.0, 0.0, 0.0], 0.0, 4, 4).is_err());
        assert!(Camera::new(Vec3::zeros(), [1.0, 0.0, 0.0, 0.0], 1.0, 0, 4).is_err());
    }
}
