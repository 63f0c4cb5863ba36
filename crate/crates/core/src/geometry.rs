//! Closed-form geometry of truncated Gaussians.
//!
//! A primitive with density `σ̃·exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))` and `Σ = R S Sᵀ Rᵀ`
//! is cut off where its density drops below a global threshold `σ_ε`. The
//! cut-off surface is an ellipsoid with semi-axes `s̃ = sqrt(2 ln(σ̃/σ_ε))·s`
//! in the primitive's local frame. Everything in this module follows from
//! that ellipsoid.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Smallest admissible scale; smaller (or zero) scales are clamped to this.
pub const MIN_SCALE: f64 = 1e-7;

/// Default global density threshold.
pub const DEFAULT_SIGMA_EPS: f64 = 0.01;

/// Volume ratio of any ellipsoid to its minimal box when the axes are
/// aligned with the world frame, and the minimum over all shapes.
pub const SPHERE_RATIO: f64 = 6.0 / PI;

const QUAT_UNIT_TOL: f64 = 1e-12;

/// Shape part of a Gaussian primitive: position, orientation, extent and
/// density amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianShape {
    mean: Vec3,
    quat: [f64; 4],
    rot: Matrix3<f64>,
    scales: Vec3,
    density: f64,
}

impl GaussianShape {
    /// `quat` is scalar-first `[w, x, y, z]` and is normalised here. Scales
    /// below [`MIN_SCALE`] are clamped; negative or non-finite values are
    /// rejected.
    pub fn new(mean: Vec3, quat: [f64; 4], scales: Vec3, density: f64) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        let quat = normalize_quat(quat)?;
        let mut clamped = scales;
        for s in clamped.iter_mut() {
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::InvalidParameter(format!("scale {s} must be finite and nonnegative")));
            }
            *s = s.max(MIN_SCALE);
        }
        if !density.is_finite() || density < 0.0 {
            return Err(Error::InvalidParameter(format!("density {density} must be finite and nonnegative")));
        }
        Ok(Self { mean, quat, rot: quat_to_matrix(quat), scales: clamped, density })
    }

    pub fn isotropic(mean: Vec3, scale: f64, density: f64) -> Result<Self> {
        Self::new(mean, [1.0, 0.0, 0.0, 0.0], Vec3::repeat(scale), density)
    }

    pub fn mean(&self) -> Vec3 {
        self.mean
    }

    pub fn quat(&self) -> [f64; 4] {
        self.quat
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rot
    }

    pub fn scales(&self) -> Vec3 {
        self.scales
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn with_mean(&self, mean: Vec3) -> Self {
        Self { mean, ..self.clone() }
    }

    /// `Rᵀ (x - μ)`.
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rot.tr_mul(&(x - self.mean))
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)`.
    pub fn mahalanobis_sq(&self, x: &Vec3) -> f64 {
        self.to_local(x).component_div(&self.scales).norm_squared()
    }

    /// Untruncated density `σ̃·G(x)`.
    pub fn density_at(&self, x: &Vec3) -> f64 {
        self.density * (-0.5 * self.mahalanobis_sq(x)).exp()
    }
}

/// Normalises a scalar-first quaternion. Quaternions already unit-length to
/// within rounding are returned untouched so that stored values survive a
/// save/load cycle bit for bit.
pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    if !n2.is_finite() || n2 < 1e-24 {
        return Err(Error::InvalidParameter("rotation quaternion has zero or non-finite norm".into()));
    }
    if (n2 - 1.0).abs() <= QUAT_UNIT_TOL {
        return Ok(q);
    }
    let n = n2.sqrt();
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

pub fn unit_quat_from_wxyz(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!(min.iter().zip(max.iter()).all(|(a, b)| a <= b));
        Self { min, max }
    }

    pub fn from_center_half(center: Vec3, half: Vec3) -> Self {
        Self { min: center - half, max: center + half }
    }

    /// The empty box: identity for [`Aabb::union`].
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn is_empty(&self) -> bool {
        self.min.iter().zip(self.max.iter()).any(|(a, b)| a > b)
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn surface_area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let e = self.extent();
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.min[i] && other.max[i] <= self.max[i])
    }

    /// Parameter interval `[t0, t1]` over which `origin + t·dir` lies inside
    /// the (closed) box, or `None` if the line misses it. Axes with a zero
    /// direction component are handled explicitly so that rays lying in a
    /// slab plane are not lost to `0·∞`.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let a = (self.min[i] - origin[i]) * inv;
            let b = (self.max[i] - origin[i]) * inv;
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Whether the ray's box interval intersects the closed range `[lo, hi]`.
    pub fn overlaps_segment(&self, origin: &Vec3, dir: &Vec3, lo: f64, hi: f64) -> bool {
        matches!(self.ray_interval(origin, dir), Some((t0, t1)) if t0 <= hi && t1 >= lo)
    }
}

/// `sqrt(2 ln(σ̃/σ_ε))`, the factor mapping scales to isosurface semi-axes.
pub fn iso_factor(density: f64, sigma_eps: f64) -> Result<f64> {
    if !(sigma_eps > 0.0) || !(density > sigma_eps) {
        return Err(Error::EmptyIsosurface { density, threshold: sigma_eps });
    }
    Ok((2.0 * (density / sigma_eps).ln()).sqrt())
}

/// Semi-axes of the `σ_ε` isosurface in the primitive's local frame.
pub fn iso_scale(shape: &GaussianShape, sigma_eps: f64) -> Result<Vec3> {
    Ok(shape.scales * iso_factor(shape.density, sigma_eps)?)
}

/// Half-lengths `L_i = sqrt(Σ_j r_ij² s̃_j²)` of the minimal box around an
/// ellipsoid with rotation `rot` and semi-axes `semi_axes`.
pub fn box_half_lengths(rot: &Matrix3<f64>, semi_axes: &Vec3) -> Vec3 {
    let sq = semi_axes.component_mul(semi_axes);
    Vec3::from_fn(|i, _| {
        (0..3).map(|j| rot[(i, j)] * rot[(i, j)] * sq[j]).sum::<f64>().sqrt()
    })
}

/// Minimal axis-aligned box around the `σ_ε` ellipsoid.
pub fn aabb_of(shape: &GaussianShape, sigma_eps: f64) -> Result<Aabb> {
    let semi = iso_scale(shape, sigma_eps)?;
    Ok(Aabb::from_center_half(shape.mean, box_half_lengths(&shape.rot, &semi)))
}

/// For each world axis `i`, the two boundary points of the ellipsoid that
/// touch the `min` and `max` faces of [`aabb_of`]. The contact point is the
/// Cauchy-Schwarz equality case: local offset `s̃² ∘ r_i / L_i`.
pub fn aabb_contact_witnesses(shape: &GaussianShape, sigma_eps: f64) -> Result<[[Vec3; 2]; 3]> {
    let semi = iso_scale(shape, sigma_eps)?;
    let half = box_half_lengths(&shape.rot, &semi);
    let sq = semi.component_mul(&semi);
    let mut out = [[Vec3::zeros(); 2]; 3];
    for i in 0..3 {
        let row = Vec3::new(shape.rot[(i, 0)], shape.rot[(i, 1)], shape.rot[(i, 2)]);
        let local = sq.component_mul(&row) / half[i];
        let offset = shape.rot * local;
        out[i] = [shape.mean - offset, shape.mean + offset];
    }
    Ok(out)
}

/// Volume `(4π/3)[2 ln(σ̃/σ_ε)]^{3/2} s_1 s_2 s_3` of the `σ_ε` ellipsoid.
pub fn ellipsoid_volume(shape: &GaussianShape, sigma_eps: f64) -> Result<f64> {
    let k = iso_factor(shape.density, sigma_eps)?;
    let s = shape.scales;
    Ok(4.0 * PI / 3.0 * k * k * k * s.x * s.y * s.z)
}

/// Ratio of the minimal box volume to the ellipsoid volume. Independent of
/// the density amplitude and threshold.
pub fn volume_ratio(shape: &GaussianShape) -> f64 {
    let s = shape.scales;
    let l = box_half_lengths(&shape.rot, &s);
    SPHERE_RATIO * (l.x * l.y * l.z) / (s.x * s.y * s.z)
}

fn bound_constant() -> f64 {
    2.0 / (PI * 3f64.sqrt())
}

/// Rotation-invariant upper bound on [`volume_ratio`]:
/// `(2/(π√3))·(s_1²+s_2²+s_3²)^{3/2} / (s_1 s_2 s_3)`.
pub fn ratio_upper_bound(s: &Vec3) -> f64 {
    let s = s.map(|v| v.max(MIN_SCALE));
    let sum_sq = s.norm_squared();
    bound_constant() * sum_sq * sum_sq.sqrt() / (s.x * s.y * s.z)
}

/// Gradient of [`ratio_upper_bound`] with respect to the scales:
/// `∂r/∂s_i = r·(3 s_i / Σ s_j² - 1/s_i)`.
pub fn ratio_upper_bound_grad(s: &Vec3) -> Vec3 {
    let s = s.map(|v| v.max(MIN_SCALE));
    let r = ratio_upper_bound(&s);
    let sum_sq = s.norm_squared();
    s.map(|si| r * (3.0 * si / sum_sq - 1.0 / si))
}

/// Weight and threshold of the isotropic regulariser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoLossConfig {
    pub weight: f64,
    pub threshold: f64,
}

impl Default for IsoLossConfig {
    fn default() -> Self {
        Self { weight: 0.00025, threshold: 10.0 }
    }
}

impl IsoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::InvalidParameter("isotropic loss weight must be >= 0".into()));
        }
        if !(self.threshold >= SPHERE_RATIO) {
            return Err(Error::InvalidParameter(format!(
                "isotropic threshold {} is below the spherical minimum 6/pi",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Unweighted isotropic loss and its gradient with respect to each
/// primitive's scales.
#[derive(Clone, Debug)]
pub struct IsoLoss {
    pub value: f64,
    pub scale_grads: Vec<Vec3>,
}

/// `L_s = (1/N) Σ_l (max(r_max,l, r_0) - r_0)`.
///
/// The weight `λ_s` is not applied here; callers scale by
/// `cfg.weight`. At `r_max = r_0` the max is treated as inactive and the
/// gradient is zero.
pub fn isotropic_loss(shapes: &[GaussianShape], cfg: &IsoLossConfig) -> Result<IsoLoss> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::EmptyScene);
    }
    let n = shapes.len() as f64;
    let mut value = 0.0;
    let mut scale_grads = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let s = shape.scales();
        let r = ratio_upper_bound(&s);
        if r > cfg.threshold {
            value += r - cfg.threshold;
            scale_grads.push(ratio_upper_bound_grad(&s) / n);
        } else {
            scale_grads.push(Vec3::zeros());
        }
    }
    Ok(IsoLoss { value: value / n, scale_grads })
}

/// Summary of a randomized check of the ratio bound and box witnesses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryAudit {
    pub trials: usize,
    pub seed: u64,
    /// Largest `volume_ratio / ratio_upper_bound - 1`. Spheres sit on the
    /// bound, so this can be a few ulps above zero.
    pub max_excess: f64,
    /// `max_excess - AUDIT_SLACK`; nonpositive when the bound holds.
    pub max_violation: f64,
    pub violations: usize,
    /// Largest `|r - 6/π|` over isotropic shapes.
    pub max_isotropic_error: f64,
    /// Largest distance of a contact witness from its face or from the surface,
    /// relative to the box half-length.
    pub max_witness_error: f64,
}

impl GeometryAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.max_isotropic_error <= 1e-9 && self.max_witness_error <= 1e-6
    }
}

/// Random shapes with log-uniform scales in `[1e-3, 1e1]` and uniform
/// rotations. Every tenth trial is isotropic.
pub fn audit(trials: usize, seed: u64) -> Result<GeometryAudit> {
    use crate::sampling::{log_uniform, random_quat_wxyz, rng};
    let mut r = rng(seed);
    let mut out = GeometryAudit {
        trials,
        seed,
        max_excess: f64::NEG_INFINITY,
        max_violation: 0.0,
        violations: 0,
        max_isotropic_error: 0.0,
        max_witness_error: 0.0,
    };
    for i in 0..trials {
        let scales = if i % 10 == 9 {
            Vec3::repeat(log_uniform(&mut r, 1e-3, 1e1))
        } else {
            Vec3::from_fn(|_, _| log_uniform(&mut r, 1e-3, 1e1))
        };
        let shape = GaussianShape::new(Vec3::zeros(), random_quat_wxyz(&mut r), scales, 1.0)?;
        let ratio = volume_ratio(&shape);
        let bound = ratio_upper_bound(&scales);
        let excess = ratio / bound - 1.0;
        out.max_excess = out.max_excess.max(excess);
        if excess > AUDIT_SLACK {
            out.violations += 1;
        }
        if i % 10 == 9 {
            out.max_isotropic_error = out.max_isotropic_error.max((ratio - SPHERE_RATIO).abs()).max((bound - SPHERE_RATIO).abs());
        }
        let semi = iso_scale(&shape, DEFAULT_SIGMA_EPS)?;
        let half = box_half_lengths(shape.rotation(), &semi);
        let aabb = aabb_of(&shape, DEFAULT_SIGMA_EPS)?;
        for (k, pair) in aabb_contact_witnesses(&shape, DEFAULT_SIGMA_EPS)?.iter().enumerate() {
            for (side, p) in pair.iter().enumerate() {
                let face = if side == 0 { aabb.min[k] } else { aabb.max[k] };
                let radius = shape.to_local(p).component_div(&semi).norm();
                let err = ((p[k] - face).abs() / half[k]).max((radius - 1.0).abs());
                out.max_witness_error = out.max_witness_error.max(err);
            }
        }
    }
    if trials == 0 {
        out.max_excess = 0.0;
    }
    out.max_violation = out.max_excess - AUDIT_SLACK;
    Ok(out)
}

/// Rounding allowance for the bound audit. The bound is tight at the sphere,
/// so equality holds there only up to floating-point error.
pub const AUDIT_SLACK: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{log_uniform, random_quat_wxyz, random_unit, rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn shape(q: [f64; 4], s: Vec3, density: f64) -> GaussianShape {
        GaussianShape::new(Vec3::zeros(), q, s, density).unwrap()
    }

    /// Boundary points of the ellipsoid: `μ + R (s̃ ∘ z)` with `z` on the unit
    /// sphere. Independent of the closed-form half-lengths.
    fn brute_half_lengths(shape: &GaussianShape, sigma_eps: f64, n: usize, seed: u64) -> Vec3 {
        let semi = iso_scale(shape, sigma_eps).unwrap();
        let mut r = rng(seed);
        let mut best = Vec3::zeros();
        for _ in 0..n {
            let z = random_unit(&mut r);
            let x = shape.rotation() * semi.component_mul(&z);
            best = best.sup(&x.abs());
        }
        best
    }

    #[test]
    fn iso_scale_unit_at_root_e() {
        let s = shape([1.0, 0.0, 0.0, 0.0], Vec3::repeat(1.0), 0.01 * 0.5f64.exp());
        let semi = iso_scale(&s, 0.01).unwrap();
        assert!((semi - Vec3::repeat(1.0)).amax() < 1e-12);
    }

    #[test]
    fn iso_scale_empty_at_threshold() {
        let s = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(0.3, 0.2, 0.1), 0.01);
        assert!(matches!(iso_scale(&s, 0.01), Err(Error::EmptyIsosurface { .. })));
        let below = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(0.3, 0.2, 0.1), 0.005);
        assert!(matches!(ellipsoid_volume(&below, 0.01), Err(Error::EmptyIsosurface { .. })));
    }

    #[test]
    fn iso_scale_lands_on_threshold_density() {
        let mut r = rng(3);
        let s = shape(random_quat_wxyz(&mut r), Vec3::new(0.1, 0.2, 0.3), 0.02);
        let semi = iso_scale(&s, 0.01).unwrap();
        let expected = 1.1774100225154747;
        assert!((semi - Vec3::new(0.1, 0.2, 0.3) * expected).amax() < 1e-15);
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = semi[axis];
            let x = s.mean() + s.rotation() * e;
            assert!((s.density_at(&x) - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn aabb_axis_aligned_and_permuted() {
        let density = 0.01 * 0.5f64.exp();
        let a = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(1.0, 2.0, 3.0), density);
        let half = aabb_of(&a, 0.01).unwrap().extent() / 2.0;
        assert!((half - Vec3::new(1.0, 2.0, 3.0)).amax() < 1e-12);

        let h = std::f64::consts::FRAC_PI_4;
        let b = shape([h.cos(), 0.0, 0.0, h.sin()], Vec3::new(1.0, 2.0, 3.0), density);
        let half = aabb_of(&b, 0.01).unwrap().extent() / 2.0;
        assert!((half - Vec3::new(2.0, 1.0, 3.0)).amax() < 1e-12);
    }

    #[test]
    fn aabb_matches_boundary_sampling() {
        let mut r = rng(11);
        for trial in 0..5 {
            let s = Vec3::new(r.gen_range(0.1..2.0), r.gen_range(0.1..2.0), r.gen_range(0.1..2.0));
            let g = shape(random_quat_wxyz(&mut r), s, 1.0);
            let half = aabb_of(&g, 0.01).unwrap().extent() / 2.0;
            let brute = brute_half_lengths(&g, 0.01, 100_000, trial);
            for i in 0..3 {
                assert!(brute[i] <= half[i] * (1.0 + 1e-12));
                assert!((half[i] - brute[i]) / half[i] < 1e-3, "axis {i}: {} vs {}", half[i], brute[i]);
            }
        }
    }

    #[test]
    fn contact_witnesses_touch_faces() {
        let mut r = rng(5);
        let g = GaussianShape::new(Vec3::new(1.0, -2.0, 0.5), random_quat_wxyz(&mut r), Vec3::new(0.2, 1.0, 3.0), 2.0)
            .unwrap();
        let b = aabb_of(&g, 0.01).unwrap();
        let semi = iso_scale(&g, 0.01).unwrap();
        let w = aabb_contact_witnesses(&g, 0.01).unwrap();
        for i in 0..3 {
            assert!((w[i][0][i] - b.min[i]).abs() < 1e-9);
            assert!((w[i][1][i] - b.max[i]).abs() < 1e-9);
            for p in &w[i] {
                let q = g.to_local(p).component_div(&semi).norm_squared();
                assert!((q - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ellipsoid_volume_values() {
        let density = 0.01 * 0.5f64.exp();
        let unit = shape([1.0, 0.0, 0.0, 0.0], Vec3::repeat(1.0), density);
        assert!((ellipsoid_volume(&unit, 0.01).unwrap() - 4.0 * PI / 3.0).abs() < 1e-12);
        let stretched = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(1.0, 2.0, 3.0), density);
        let v = ellipsoid_volume(&stretched, 0.01).unwrap();
        assert!((v - 8.0 * PI).abs() < 1e-10);

        // Monte-Carlo estimate inside the box [-1,1]x[-2,2]x[-3,3].
        let mut r = rng(1);
        let n = 400_000;
        let inside = (0..n)
            .filter(|_| {
                let p = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-2.0..2.0), r.gen_range(-3.0..3.0));
                (p.x * p.x) + (p.y * p.y) / 4.0 + (p.z * p.z) / 9.0 <= 1.0
            })
            .count();
        let mc = 48.0 * inside as f64 / n as f64;
        assert!((mc - v).abs() / v < 0.01);
    }

    #[test]
    fn ratio_of_spheres_and_aligned_shapes() {
        let mut r = rng(2);
        for _ in 0..10 {
            let q = random_quat_wxyz(&mut r);
            assert!((volume_ratio(&shape(q, Vec3::repeat(0.7), 1.0)) - 1.909859317102744).abs() < 1e-12);
            let s = Vec3::new(r.gen_range(0.1..5.0), r.gen_range(0.1..5.0), r.gen_range(0.1..5.0));
            assert!((volume_ratio(&shape([1.0, 0.0, 0.0, 0.0], s, 1.0)) - SPHERE_RATIO).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_equals_box_over_ellipsoid() {
        let mut r = rng(9);
        for _ in 0..50 {
            let g = shape(random_quat_wxyz(&mut r), Vec3::new(1.0, 1.0, 10.0), 3.0);
            let composed = aabb_of(&g, 0.01).unwrap().volume() / ellipsoid_volume(&g, 0.01).unwrap();
            assert!((volume_ratio(&g) - composed).abs() / composed < 1e-9);
        }
    }

    #[test]
    fn ratio_independent_of_density_and_threshold() {
        let mut r = rng(4);
        let q = random_quat_wxyz(&mut r);
        let a = shape(q, Vec3::new(0.1, 0.5, 2.0), 1.0);
        let b = shape(q, Vec3::new(0.1, 0.5, 2.0), 37.0);
        assert_eq!(volume_ratio(&a), volume_ratio(&b));
        let ra = aabb_of(&a, 0.01).unwrap().volume() / ellipsoid_volume(&a, 0.01).unwrap();
        let rb = aabb_of(&b, 0.37).unwrap().volume() / ellipsoid_volume(&b, 0.37).unwrap();
        assert!((ra - rb).abs() / ra < 1e-12);
        let c = shape(q, Vec3::new(0.3, 1.5, 6.0), 1.0);
        assert!((volume_ratio(&a) - volume_ratio(&c)).abs() < 1e-12);
    }

    #[test]
    fn bound_values() {
        assert!((ratio_upper_bound(&Vec3::repeat(1.0)) - 1.909859317102744).abs() < 1e-12);
        assert!((ratio_upper_bound(&Vec3::new(1.0, 1.0, 10.0)) - 37.86341253342387).abs() < 1e-10);
        assert_eq!(ratio_upper_bound(&Vec3::repeat(2.0)), ratio_upper_bound(&Vec3::repeat(1.0)));
    }

    #[test]
    fn bound_dominates_sampled_rotations() {
        let s = Vec3::new(1.0, 1.0, 10.0);
        let bound = ratio_upper_bound(&s);
        let mut r = rng(8);
        let max = (0..10_000)
            .map(|_| volume_ratio(&shape(random_quat_wxyz(&mut r), s, 1.0)))
            .fold(0.0, f64::max);
        assert!(max <= bound);
    }

    #[test]
    fn bound_nearly_attained_for_mild_anisotropy() {
        let s = Vec3::new(1.0, 1.3, 1.6);
        let bound = ratio_upper_bound(&s);
        let mut r = rng(12);
        let max = (0..100_000)
            .map(|_| volume_ratio(&shape(random_quat_wxyz(&mut r), s, 1.0)))
            .fold(0.0, f64::max);
        assert!(max <= bound && (bound - max) / bound < 0.02, "max {max}, bound {bound}");
    }

    #[test]
    fn loss_zero_for_isotropic_shapes() {
        let shapes: Vec<_> = (1..5).map(|i| shape([1.0, 0.0, 0.0, 0.0], Vec3::repeat(i as f64), 1.0)).collect();
        let loss = isotropic_loss(&shapes, &IsoLossConfig::default()).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.scale_grads.iter().all(|g| *g == Vec3::zeros()));
    }

    #[test]
    fn loss_single_anisotropic_shape() {
        let g = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(1.0, 1.0, 10.0), 1.0);
        let loss = isotropic_loss(&[g], &IsoLossConfig::default()).unwrap();
        assert!((loss.value - (37.86341253342387 - 10.0)).abs() < 1e-10);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(isotropic_loss(&[], &IsoLossConfig::default()), Err(Error::EmptyScene)));
        let cfg = IsoLossConfig { weight: 1.0, threshold: 1.0 };
        let g = shape([1.0, 0.0, 0.0, 0.0], Vec3::repeat(1.0), 1.0);
        assert!(isotropic_loss(&[g], &cfg).is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let cfg = IsoLossConfig { weight: 1.0, threshold: 10.0 };
        let mut r = rng(21);
        let mut checked = 0;
        while checked < 100 {
            let s = Vec3::new(log_uniform(&mut r, 0.01, 1.0), log_uniform(&mut r, 0.01, 1.0), log_uniform(&mut r, 0.01, 1.0));
            if ratio_upper_bound(&s) < cfg.threshold * 1.01 {
                continue;
            }
            let q = random_quat_wxyz(&mut r);
            let others = vec![shape(q, Vec3::new(1.0, 1.0, 1.0), 1.0), shape(q, s, 1.0)];
            let analytic = isotropic_loss(&others, &cfg).unwrap().scale_grads[1];
            for i in 0..3 {
                let h = 1e-5 * s[i];
                let mut sp = s;
                let mut sm = s;
                sp[i] += h;
                sm[i] -= h;
                let lp = isotropic_loss(&[others[0].clone(), shape(q, sp, 1.0)], &cfg).unwrap().value;
                let lm = isotropic_loss(&[others[0].clone(), shape(q, sm, 1.0)], &cfg).unwrap().value;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - analytic[i]).abs() <= 1e-4 * analytic[i].abs().max(1e-8), "{fd} vs {}", analytic[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn degenerate_scales_are_clamped() {
        let g = shape([1.0, 0.0, 0.0, 0.0], Vec3::new(0.0, 1.0, 1.0), 1.0);
        assert_eq!(g.scales().x, MIN_SCALE);
        assert!(volume_ratio(&g).is_finite());
        assert!(GaussianShape::new(Vec3::zeros(), [1.0, 0.0, 0.0, 0.0], Vec3::new(-1.0, 1.0, 1.0), 1.0).is_err());
        assert!(GaussianShape::new(Vec3::zeros(), [0.0; 4], Vec3::repeat(1.0), 1.0).is_err());
    }

    #[test]
    fn slab_interval_handles_axis_parallel_rays() {
        let b = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let dir = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(b.ray_interval(&Vec3::new(-5.0, 1.0, 0.0), &dir), Some((4.0, 6.0)));
        assert_eq!(b.ray_interval(&Vec3::new(-5.0, 1.5, 0.0), &dir), None);
        assert!(b.overlaps_segment(&Vec3::new(-5.0, 0.0, 0.0), &dir, 4.5, 4.6));
        assert!(!b.overlaps_segment(&Vec3::new(-5.0, 0.0, 0.0), &dir, 6.1, 7.0));
    }

    proptest! {
        #[test]
        fn bound_dominates_ratio(
            w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            s1 in -3.0..1.0f64, s2 in -3.0..1.0f64, s3 in -3.0..1.0f64,
        ) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let s = Vec3::new(10f64.powf(s1), 10f64.powf(s2), 10f64.powf(s3));
            let g = shape([w, x, y, z], s, 1.0);
            let ratio = volume_ratio(&g);
            prop_assert!(ratio >= SPHERE_RATIO * (1.0 - 1e-12));
            prop_assert!(ratio <= ratio_upper_bound(&s) * (1.0 + 1e-12));
        }

        #[test]
        fn bound_is_scale_invariant(s1 in 0.01..10.0f64, s2 in 0.01..10.0f64, s3 in 0.01..10.0f64, c in 0.1..10.0f64) {
            let s = Vec3::new(s1, s2, s3);
            let a = ratio_upper_bound(&s);
            let b = ratio_upper_bound(&(s * c));
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn audit_finds_no_violations() {
        let a = audit(2000, 3).unwrap();
        assert!(a.passed(), "{a:?}");
        assert!(a.max_violation <= 0.0);
        assert_eq!(audit(2000, 3).unwrap(), a);
    }
}
