//! Camera-sphere reparameterisation of a primitive mean.
//!
//! A mean `μ` seen from camera center `o` with focal distance `f` is written
//! as `(μ_P, r)`: its projection `μ_P = o + f·u` onto the sphere of radius
//! `f` around `o` (with `u = (μ-o)/‖μ-o‖`) and its distance `r = ‖μ-o‖`. The
//! inverse map is `F(μ_P, r) = o + (r/f)(μ_P - o)`.

use nalgebra::Matrix3;

use crate::{Error, Result, Vec3};

const DEGENERATE_DISTANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereParam {
    pub projected: Vec3,
    pub radius: f64,
    pub center: Vec3,
    pub focal: f64,
}

impl SphereParam {
    /// Unit direction `u` from the camera center to the mean.
    pub fn direction(&self) -> Vec3 {
        (self.projected - self.center) / self.focal
    }

    /// `F(μ_P, r)`.
    pub fn reproject(&self) -> Vec3 {
        reproject(&self.projected, self.radius, &self.center, self.focal)
    }
}

fn check_focal(focal: f64) -> Result<()> {
    if !(focal > 0.0) || !focal.is_finite() {
        return Err(Error::InvalidParameter(format!("focal {focal} must be > 0")));
    }
    Ok(())
}

pub fn project(mean: &Vec3, center: &Vec3, focal: f64) -> Result<SphereParam> {
    check_focal(focal)?;
    let v = mean - center;
    let r = v.norm();
    if r < DEGENERATE_DISTANCE {
        return Err(Error::DegenerateCenter);
    }
    Ok(SphereParam { projected: center + v * (focal / r), radius: r, center: *center, focal })
}

pub fn reproject(projected: &Vec3, radius: f64, center: &Vec3, focal: f64) -> Vec3 {
    center + (projected - center) * (radius / focal)
}

/// `I - u uᵀ`, the projector onto the sphere's tangent plane at `μ_P`.
pub fn tangent_projector(u: &Vec3) -> Matrix3<f64> {
    Matrix3::identity() - u * u.transpose()
}

/// Gradient split of a loss under the sphere parameterisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereGradient {
    /// `∇_{μ_P} L = (r/f)(I - u uᵀ) ∇_μ L`.
    pub tangential: Vec3,
    /// `∇_r L = (1/f)(μ_P - o)ᵀ ∇_μ L = u·∇_μ L`.
    pub radial: f64,
}

pub fn sphere_gradient(grad_mean: &Vec3, mean: &Vec3, center: &Vec3, focal: f64) -> Result<SphereGradient> {
    let p = project(mean, center, focal)?;
    let u = p.direction();
    let tangential = tangent_projector(&u) * grad_mean * (p.radius / focal);
    let radial = (p.projected - center).dot(grad_mean) / focal;
    Ok(SphereGradient { tangential, radial })
}
