//! View-dependent radiance and the density/radiance mixture fields.
//!
//! Each primitive carries nine real spherical-harmonic coefficients (bands
//! 0..=2) and seven spherical-Gaussian lobes per colour channel. The mixture
//! colour at a point is the density-weighted average of the per-primitive
//! radiance of every primitive whose truncation ellipsoid contains it.

use serde::{Deserialize, Serialize};

use crate::{Result, Rgb, Scene, Vec3};

pub const SH_COEFFS: usize = 9;
pub const SG_LOBES: usize = 7;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// One spherical-Gaussian lobe `a·exp(λ(d·ν - 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgLobe {
    pub axis: Vec3,
    pub sharpness: f64,
    pub amplitude: Rgb,
}

impl SgLobe {
    pub fn zero() -> Self {
        Self { axis: Vec3::z(), sharpness: 0.0, amplitude: Rgb::zeros() }
    }

    pub fn eval(&self, d: &Vec3) -> Rgb {
        self.amplitude * (self.sharpness * (d.dot(&self.axis) - 1.0)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceCoeffs {
    pub sh: [Rgb; SH_COEFFS],
    pub sg: [SgLobe; SG_LOBES],
}

impl AppearanceCoeffs {
    pub fn zero() -> Self {
        Self { sh: [Rgb::zeros(); SH_COEFFS], sg: [SgLobe::zero(); SG_LOBES] }
    }

    /// Direction-independent radiance `rgb`.
    pub fn constant(rgb: Rgb) -> Self {
        let mut c = Self::zero();
        c.sh[0] = rgb / SH_C0;
        c
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for v in &self.sh {
            if !v.iter().all(|x| x.is_finite()) {
                return Err("non-finite SH coefficient".into());
            }
        }
        for (k, lobe) in self.sg.iter().enumerate() {
            if (lobe.axis.norm() - 1.0).abs() > 1e-6 {
                return Err(format!("SG lobe {k} axis is not unit length"));
            }
            if !(lobe.sharpness >= 0.0) || !lobe.sharpness.is_finite() {
                return Err(format!("SG lobe {k} sharpness must be finite and >= 0"));
            }
            if !lobe.amplitude.iter().all(|x| x.is_finite()) {
                return Err(format!("SG lobe {k} amplitude is not finite"));
            }
        }
        Ok(())
    }
}

/// Real SH basis up to band 2, ordered `Y00; Y1-1, Y10, Y11; Y2-2..Y22`.
pub fn sh_basis(d: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

/// Radiance `c_l(d)`: SH expansion plus SG lobes, clamped to be nonnegative.
pub fn eval_radiance(coeffs: &AppearanceCoeffs, d: &Vec3) -> Rgb {
    let basis = sh_basis(d);
    let mut c = Rgb::zeros();
    for (b, k) in basis.iter().zip(coeffs.sh.iter()) {
        c += k * *b;
    }
    for lobe in &coeffs.sg {
        c += lobe.eval(d);
    }
    c.map(|v| v.max(0.0))
}

/// Density and colour of the mixture at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: Rgb,
}

/// Evaluates `σ(x)` and `c(x, d)` over the primitives listed in `active`
/// (storage indices). Primitives are visited in ascending id order; any
/// primitive whose ellipsoid does not contain `x` contributes exactly zero.
/// When `σ = 0` the colour is black.
pub fn eval_fields(scene: &Scene, x: &Vec3, d: &Vec3, active: &[u32]) -> FieldSample {
    let mut order: Vec<u32> = active.to_vec();
    scene.sort_by_id(&mut order);
    let mut sigma = 0.0;
    let mut weighted = Rgb::zeros();
    for &idx in &order {
        if let Some(s) = scene.truncated_density(idx as usize, x) {
            sigma += s;
            weighted += eval_radiance(&scene.primitives()[idx as usize].appearance, d) * s;
        }
    }
    if sigma > 0.0 {
        FieldSample { sigma, color: weighted / sigma }
    } else {
        FieldSample { sigma: 0.0, color: Rgb::zeros() }
    }
}

/// [`eval_fields`] over every primitive in the scene.
pub fn eval_fields_all(scene: &Scene, x: &Vec3, d: &Vec3) -> FieldSample {
    let all: Vec<u32> = (0..scene.len() as u32).collect();
    eval_fields(scene, x, d, &all)
}

/// Validates coefficients, for use by loaders.
pub fn check(coeffs: &AppearanceCoeffs) -> Result<()> {
    coeffs.validate().map_err(crate::Error::InvalidParameter)
}
