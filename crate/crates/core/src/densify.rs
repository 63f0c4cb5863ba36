//! Densification statistics: accumulated position-gradient norms, the
//! unweighted and distance-weighted split criteria, neighbour counts and the
//! image loss the gradients are taken of.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{isotropic_loss, IsoLossConfig};
use crate::image::Image;
use crate::renderer::{render_image, RenderConfig, SamplingMode};
use crate::reparam::sphere_gradient;
use crate::{Camera, Error, Result, Scene, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Gradient threshold `τ`.
    pub tau: f64,
    /// Iterations between criterion evaluations.
    pub window: usize,
    /// Neighbour radius `R`.
    pub radius: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self { tau: 0.00015, window: 100, radius: 0.125 }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.radius > 0.0) || self.window == 0 {
            return Err(Error::InvalidParameter("need tau > 0, radius > 0 and window >= 1".into()));
        }
        Ok(())
    }
}

/// `α = ‖μ - o‖ / f`.
pub fn camera_alpha(mean: &Vec3, center: &Vec3, focal: f64) -> f64 {
    (mean - center).norm() / focal
}

/// Per-primitive sums of gradient norms over a window of observations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccumulator {
    weighted: Vec<f64>,
    unweighted: Vec<f64>,
    count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self { weighted: vec![0.0; n], unweighted: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Records one view's gradient norm for primitive `l`.
    pub fn observe(&mut self, l: usize, grad_norm: f64, alpha: f64) -> Result<()> {
        if !(grad_norm >= 0.0) || !(alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("observation ({grad_norm}, {alpha}) must be nonnegative")));
        }
        self.weighted[l] += alpha * grad_norm;
        self.unweighted[l] += grad_norm;
        self.count[l] += 1;
        Ok(())
    }

    /// Records a gradient seen from camera center `center` with focal `focal`.
    pub fn observe_view(&mut self, l: usize, grad: &Vec3, mean: &Vec3, center: &Vec3, focal: f64) -> Result<()> {
        self.observe(l, grad.norm(), camera_alpha(mean, center, focal))
    }

    pub fn merge(&mut self, other: &GradAccumulator) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidParameter("accumulator sizes differ".into()));
        }
        for i in 0..self.len() {
            self.weighted[i] += other.weighted[i];
            self.unweighted[i] += other.unweighted[i];
            self.count[i] += other.count[i];
        }
        Ok(())
    }

    pub fn count(&self, l: usize) -> u32 {
        self.count[l]
    }

    /// `(1/I_l) Σ ‖∇‖`, or `None` before the first observation.
    pub fn mean_norm(&self, l: usize) -> Option<f64> {
        (self.count[l] > 0).then(|| self.unweighted[l] / self.count[l] as f64)
    }

    /// `(1/I_l) Σ α_i ‖∇‖`.
    pub fn mean_weighted_norm(&self, l: usize) -> Option<f64> {
        (self.count[l] > 0).then(|| self.weighted[l] / self.count[l] as f64)
    }
}

/// Unweighted criterion. Primitives without observations are never flagged.
pub fn criterion_old(acc: &GradAccumulator, cfg: &DensifyConfig) -> Vec<bool> {
    (0..acc.len()).map(|l| acc.mean_norm(l).is_some_and(|m| m > cfg.tau)).collect()
}

/// Distance-weighted criterion.
pub fn criterion_new(acc: &GradAccumulator, cfg: &DensifyConfig) -> Vec<bool> {
    (0..acc.len()).map(|l| acc.mean_weighted_norm(l).is_some_and(|m| m > cfg.tau)).collect()
}

/// Number of other points within distance `radius` (inclusive) of each point.
pub fn neighbor_density(means: &[Vec3], radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("radius {radius} must be > 0")));
    }
    let cell = |p: &Vec3| -> [i64; 3] { [0, 1, 2].map(|k| (p[k] / radius).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in means.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    Ok(means
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = cell(p);
            let mut n = 0;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            n += bucket.iter().filter(|&&j| j != i && (means[j] - p).norm_squared() <= r2).count();
                        }
                    }
                }
            }
            n
        })
        .collect())
}

/// Writes points with a per-point scalar as an ASCII PLY.
pub fn write_density_ply(path: &Path, means: &[Vec3], values: &[f64]) -> Result<()> {
    if means.len() != values.len() {
        return Err(Error::InvalidParameter("one value per point required".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", means.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z\nproperty double density\nend_header")?;
    for (m, v) in means.iter().zip(values) {
        writeln!(w, "{} {} {} {}", m.x, m.y, m.z, v)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Image loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// DSSIM mix weight `λ`.
    pub lambda: f64,
    pub iso: IsoLossConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2, iso: IsoLossConfig::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda {} must lie in [0, 1]", self.lambda)));
        }
        self.iso.validate()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Same-size separable filtering with zero padding.
fn blur(src: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - half;
                if (0..width as isize).contains(&xx) {
                    acc += kv * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - half;
                if (0..height as isize).contains(&yy) {
                    acc += kv * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels with an 11×11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.pixels.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (sxx, syy, sxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        for i in 0..x.len() {
            let (mx2, my2, mxy) = (mx[i] * mx[i], my[i] * my[i], mx[i] * my[i]);
            let vx = sxx[i] - mx2;
            let vy = syy[i] - my2;
            let cov = sxy[i] - mxy;
            total += ((2.0 * mxy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx2 + my2 + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (3 * w * h) as f64)
}

pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(p, q)| (p - q).abs().sum()).sum();
    Ok(sum / (3 * a.pixels.len()) as f64)
}

/// `(1 - λ)·L1 + λ·DSSIM`. The isotropic term is added by
/// [`total_loss`].
pub fn image_loss(rendered: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let l = l1(rendered, target)?;
    if cfg.lambda == 0.0 {
        return Ok(l);
    }
    Ok((1.0 - cfg.lambda) * l + cfg.lambda * dssim(rendered, target)?)
}

/// Image loss plus `λ_s·L_s` of the scene's shapes.
pub fn total_loss(scene: &Scene, rendered: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(image_loss(rendered, target, cfg)? + cfg.iso.weight * isotropic_loss(&scene.shapes(), &cfg.iso)?.value)
}

/// Finite-difference step `1e-4 ×` the scene box diagonal.
pub fn default_fd_step(scene: &Scene) -> f64 {
    let d = scene.bounds().extent().norm();
    if d.is_finite() && d > 0.0 {
        1e-4 * d
    } else {
        1e-4
    }
}

/// Central-difference gradient of the total loss with respect to the mean
/// of primitive `index`. Rendering is forced to uniform mode so the sample
/// grid does not move with the primitive.
pub fn fd_position_gradient(
    scene: &Scene,
    camera: &Camera,
    target: &Image,
    index: usize,
    h: f64,
    loss_cfg: &LossConfig,
    render_cfg: &RenderConfig,
) -> Result<Vec3> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("fd step {h} must be > 0")));
    }
    if index >= scene.len() {
        return Err(Error::InvalidParameter(format!("primitive index {index} out of range")));
    }
    let cfg = RenderConfig { mode: SamplingMode::Uniform, ..render_cfg.clone() };
    let mean = scene.primitives()[index].shape.mean();
    let eval = |m: Vec3| -> Result<(f64, f64)> {
        let moved = scene.with_mean(index, m)?;
        let (img, _) = render_image(&moved, camera, &cfg)?;
        let iso = isotropic_loss(&moved.shapes(), &loss_cfg.iso)?.value;
        Ok((image_loss(&img, target, loss_cfg)?, iso))
    };
    let mut grad = Vec3::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        let (ip, sp) = eval(mean + e)?;
        let (im, sm) = eval(mean - e)?;
        grad[k] = (ip - im) / (2.0 * h) + loss_cfg.iso.weight * ((sp - sm) / (2.0 * h));
    }
    Ok(grad)
}

/// One row of a densification analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveReport {
    pub id: u32,
    pub observations: u32,
    pub mean_grad_norm: f64,
    pub mean_weighted_grad_norm: f64,
    /// Mean `|∇_r L| / ‖∇_μ L‖` over views with a nonzero gradient.
    pub mean_radial_fraction: f64,
    pub old: bool,
    pub new: bool,
    pub neighbors: usize,
}

/// Finite-difference gradients of every primitive in every view, fed through
/// both criteria. `targets[i]` is the reference image for `cameras[i]`.
pub fn analyze(
    scene: &Scene,
    cameras: &[Camera],
    targets: &[Image],
    cfg: &DensifyConfig,
    loss_cfg: &LossConfig,
    render_cfg: &RenderConfig,
    h: f64,
) -> Result<Vec<PrimitiveReport>> {
    cfg.validate()?;
    if cameras.len() != targets.len() {
        return Err(Error::InvalidParameter("one target image per camera required".into()));
    }
    let n = scene.len();
    let mut acc = GradAccumulator::new(n);
    let mut radial = vec![(0.0, 0u32); n];
    for (cam, target) in cameras.iter().zip(targets) {
        for l in 0..n {
            let g = fd_position_gradient(scene, cam, target, l, h, loss_cfg, render_cfg)?;
            let mean = scene.primitives()[l].shape.mean();
            acc.observe_view(l, &g, &mean, &cam.origin(), cam.focal)?;
            let norm = g.norm();
            if norm > 0.0 {
                if let Ok(sg) = sphere_gradient(&g, &mean, &cam.origin(), cam.focal) {
                    radial[l].0 += sg.radial.abs() / norm;
                    radial[l].1 += 1;
                }
            }
        }
    }
    let old = criterion_old(&acc, cfg);
    let new = criterion_new(&acc, cfg);
    let neighbors = neighbor_density(&scene.means(), cfg.radius)?;
    Ok((0..n)
        .map(|l| PrimitiveReport {
            id: scene.primitives()[l].id,
            observations: acc.count(l),
            mean_grad_norm: acc.mean_norm(l).unwrap_or(0.0),
            mean_weighted_grad_norm: acc.mean_weighted_norm(l).unwrap_or(0.0),
            mean_radial_fraction: if radial[l].1 > 0 { radial[l].0 / radial[l].1 as f64 } else { 0.0 },
            old: old[l],
            new: new[l],
            neighbors: neighbors[l],
        })
        .collect())
}

pub const REPORT_CSV_HEADER: &str =
    "id,observations,mean_grad_norm,mean_weighted_grad_norm,mean_radial_fraction,old,new,neighbors";

pub fn report_csv(rows: &[PrimitiveReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:.6},{},{},{}\n",
            r.id, r.observations, r.mean_grad_norm, r.mean_weighted_grad_norm, r.mean_radial_fraction, r.old, r.new, r.neighbors
        ));
    }
    s
}
