//! Desk-scale ablations: pipeline comparisons, false positives versus
//! anisotropy, and storage locality.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::AppearanceCoeffs;
use crate::geometry::{GaussianShape, DEFAULT_SIGMA_EPS};
use crate::image::Image;
use crate::renderer::{render_image, render_reference, RenderConfig, RenderStats, SamplingMode};
use crate::sampling::{log_uniform, random_quat_wxyz, random_unit, rng, uniform_in_box};
use crate::spatial::{HitBuffer, TraversalStats};
use crate::{Camera, Error, Primitive, Result, Rgb, Scene, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    Uniform,
    Ess,
    Adaptive,
    EssAdaptive,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Self::Uniform, Self::Ess, Self::Adaptive, Self::EssAdaptive];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Ess => "ess",
            Self::Adaptive => "adaptive",
            Self::EssAdaptive => "ess+adaptive",
        }
    }

    /// `base` with the sampling mode and skipping switch of this pipeline.
    pub fn config(self, base: &RenderConfig) -> RenderConfig {
        let (mode, ess) = match self {
            Self::Uniform => (SamplingMode::Uniform, false),
            Self::Ess => (SamplingMode::Uniform, true),
            Self::Adaptive => (SamplingMode::Adaptive, false),
            Self::EssAdaptive => (SamplingMode::Adaptive, true),
        };
        RenderConfig { mode, empty_space_skipping: ess, ..base.clone() }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown pipeline {s:?}")))
    }
}

pub fn parse_pipelines(list: &str) -> Result<Vec<Pipeline>> {
    let out: Vec<Pipeline> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::InvalidParameter("no pipelines given".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub render: RenderConfig,
    /// Timed runs per pipeline; the median is reported.
    pub runs: usize,
    pub warmup: usize,
    /// Reference step is `render.step / reference_divisor`.
    pub reference_divisor: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { render: RenderConfig::default(), runs: 5, warmup: 1, reference_divisor: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pipeline: String,
    pub rays: u64,
    pub samples_per_ray: f64,
    pub node_visits_per_ray: f64,
    pub aabb_hits_per_ray: f64,
    pub ellipsoid_hits_per_ray: f64,
    pub false_positive_fraction: f64,
    pub wall_time_ms: f64,
    pub psnr_db: f64,
    /// For `ess`: largest per-channel difference to the same renders without
    /// skipping.
    pub max_abs_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub reference_step: f64,
    pub cameras: usize,
}

pub const CSV_HEADER: &str = "pipeline,rays,samples_per_ray,node_visits_per_ray,aabb_hits_per_ray,ellipsoid_hits_per_ray,false_positive_fraction,wall_time_ms,psnr_db,max_abs_diff";

impl BenchReport {
    pub fn row(&self, p: Pipeline) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.pipeline == p.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.3},{:.4},{}\n",
                r.pipeline,
                r.rays,
                r.samples_per_ray,
                r.node_visits_per_ray,
                r.aabb_hits_per_ray,
                r.ellipsoid_hits_per_ray,
                r.false_positive_fraction,
                r.wall_time_ms,
                r.psnr_db,
                r.max_abs_diff.map(|d| format!("{d:e}")).unwrap_or_default()
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        // JSON has no infinity; identical images are reported as null PSNR.
        let mut v = serde_json::to_value(self)?;
        if let Some(rows) = v.get_mut("rows").and_then(|r| r.as_array_mut()) {
            for (row, r) in rows.iter_mut().zip(&self.rows) {
                if !r.psnr_db.is_finite() {
                    row["psnr_db"] = serde_json::Value::Null;
                }
            }
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn render_all(scene: &Scene, cameras: &[Camera], cfg: &RenderConfig) -> Result<(Vec<Image>, RenderStats)> {
    let mut stats = RenderStats::default();
    let mut images = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let (img, s) = render_image(scene, cam, cfg)?;
        stats += s;
        images.push(img);
    }
    Ok((images, stats))
}

fn max_abs_diff_all(a: &[Image], b: &[Image]) -> Result<f64> {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).try_fold(0.0, |m, d| d.map(|d| f64::max(m, d)))
}

/// PSNR over the concatenation of all images.
pub fn psnr_all(a: &[Image], b: &[Image]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        let pixels = 3 * x.pixels.len();
        sum += x.mse(y)? * pixels as f64;
        n += pixels;
    }
    let mse = sum / n.max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Renders every camera with each pipeline and compares against the dense
/// reference integrator.
pub fn run_pipeline_matrix(scene: &Scene, cameras: &[Camera], pipelines: &[Pipeline], cfg: &BenchConfig) -> Result<BenchReport> {
    if pipelines.is_empty() {
        return Err(Error::InvalidParameter("at least one pipeline is required".into()));
    }
    if cameras.is_empty() {
        return Err(Error::InvalidParameter("at least one camera is required".into()));
    }
    if !(cfg.reference_divisor >= 1.0) {
        return Err(Error::InvalidParameter("reference_divisor must be >= 1".into()));
    }
    cfg.render.validate()?;
    let reference_step = cfg.render.step / cfg.reference_divisor;
    let reference: Vec<Image> =
        cameras.iter().map(|c| render_reference(scene, c, &cfg.render, reference_step)).collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(pipelines.len());
    for &p in pipelines {
        let rcfg = p.config(&cfg.render);
        for _ in 0..cfg.warmup {
            render_all(scene, cameras, &rcfg)?;
        }
        let mut times = Vec::with_capacity(cfg.runs);
        let mut result = None;
        for _ in 0..cfg.runs.max(1) {
            let start = Instant::now();
            let r = render_all(scene, cameras, &rcfg)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            result.get_or_insert(r);
        }
        let (images, stats) = result.expect("at least one run");
        let max_abs_diff = if p == Pipeline::Ess {
            let (plain, _) = render_all(scene, cameras, &Pipeline::Uniform.config(&cfg.render))?;
            Some(max_abs_diff_all(&images, &plain)?)
        } else {
            None
        };
        let per_ray = |v: u64| if stats.rays == 0 { 0.0 } else { v as f64 / stats.rays as f64 };
        rows.push(BenchRow {
            pipeline: p.name().into(),
            rays: stats.rays,
            samples_per_ray: stats.samples_per_ray(),
            node_visits_per_ray: per_ray(stats.node_visits),
            aabb_hits_per_ray: per_ray(stats.aabb_hits),
            ellipsoid_hits_per_ray: per_ray(stats.ellipsoid_hits),
            false_positive_fraction: stats.false_positive_fraction(),
            wall_time_ms: median(times),
            psnr_db: psnr_all(&images, &reference)?,
            max_abs_diff,
        });
    }
    Ok(BenchReport { rows, reference_step, cameras: cameras.len() })
}

/// Outcome of re-rendering under toggles that must not change any pixel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub ess: bool,
    pub morton: bool,
    pub tile_size: bool,
    pub threads: bool,
}

impl InvarianceReport {
    pub fn all(&self) -> bool {
        self.ess && self.morton && self.tile_size && self.threads
    }
}

fn bitwise_all(a: &[Image], b: &[Image]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

/// Checks uniform-mode renders for bitwise equality across ESS on/off,
/// Morton reordering, tile sizes `{1, 16}` and thread counts `{1, 4, 8}`.
pub fn check_invariance(scene: &Scene, cameras: &[Camera], base: &RenderConfig) -> Result<InvarianceReport> {
    let cfg = RenderConfig { mode: SamplingMode::Uniform, tile_size: 16, threads: None, ..base.clone() };
    let (reference, _) = render_all(scene, cameras, &cfg)?;
    let toggled = |c: RenderConfig| -> Result<bool> { Ok(bitwise_all(&reference, &render_all(scene, cameras, &c)?.0)) };
    let ess = toggled(RenderConfig { empty_space_skipping: !cfg.empty_space_skipping, ..cfg.clone() })?;
    let tile_size = toggled(RenderConfig { tile_size: 1, ..cfg.clone() })?;
    let mut threads = true;
    for n in [1, 4, 8] {
        threads &= toggled(RenderConfig { threads: Some(n), ..cfg.clone() })?;
    }
    let mut reordered = scene.clone();
    reordered.reorder_by_morton()?;
    let morton = bitwise_all(&reference, &render_all(&reordered, cameras, &cfg)?.0);
    Ok(InvarianceReport { ess, morton, tile_size, threads })
}

// ---------------------------------------------------------------------------
// Isotropy sweep
// ---------------------------------------------------------------------------

/// Paired random scene family: shared means, rotations and base scales; the
/// level `a` sets scales to `base·(1, 1, a)/a^{1/3}` so volume is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTemplate {
    pub count: usize,
    pub seed: u64,
    /// Geometric mean scale of the isotropic member.
    pub scale: f64,
    pub density: f64,
}

impl Default for SweepTemplate {
    fn default() -> Self {
        Self { count: 400, seed: 0, scale: 0.05, density: 20.0 }
    }
}

impl SweepTemplate {
    pub fn scene(&self, anisotropy: f64) -> Result<Scene> {
        if !(anisotropy >= 1.0) {
            return Err(Error::InvalidParameter(format!("anisotropy {anisotropy} must be >= 1")));
        }
        let mut r = rng(self.seed);
        let prims = (0..self.count)
            .map(|i| {
                let m = uniform_in_box(&mut r, Vec3::repeat(-1.0), Vec3::repeat(1.0));
                let q = random_quat_wxyz(&mut r);
                let base = self.scale * log_uniform(&mut r, 0.7, 1.4);
                let s = Vec3::new(1.0, 1.0, anisotropy) * (base / anisotropy.cbrt());
                Ok(Primitive {
                    id: i as u32,
                    shape: GaussianShape::new(m, q, s, self.density)?,
                    appearance: AppearanceCoeffs::constant(Rgb::repeat(0.5)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(prims, DEFAULT_SIGMA_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub anisotropy: f64,
    pub aabb_hits: u64,
    pub ellipsoid_hits: u64,
    pub false_positive_fraction: f64,
    /// Bootstrap 95% interval of the fraction.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Per consecutive pair: the bootstrap 2.5th percentile of the increase
    /// in false-positive fraction is positive.
    pub increasing: Vec<bool>,
}

impl SweepResult {
    pub fn strictly_increasing(&self) -> bool {
        self.increasing.iter().all(|&b| b)
    }
}

/// Rays from a sphere of radius 3 toward random points in `[-1, 1]³`.
pub fn sweep_rays(n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut r = rng(seed ^ 0x5eed_0f_4a75);
    (0..n)
        .map(|_| {
            let o = random_unit(&mut r) * 3.0;
            let target = uniform_in_box(&mut r, Vec3::repeat(-1.0), Vec3::repeat(1.0));
            (o, (target - o).normalize())
        })
        .collect()
}

/// `(aabb hits, ellipsoid hits)` over the full length of each ray.
pub fn ray_hit_counts(scene: &Scene, rays: &[(Vec3, Vec3)]) -> Result<Vec<(u64, u64)>> {
    let mut buf = HitBuffer::new(scene.len().max(1));
    rays.iter()
        .map(|(o, d)| {
            let mut t = TraversalStats::default();
            scene.collect_segment(o, d, 0.0, 1e3, &mut buf, &mut t)?;
            Ok((t.aabb_hits, t.ellipsoid_hits))
        })
        .collect()
}

fn fraction(counts: &[(u64, u64)], idx: impl Iterator<Item = usize>) -> f64 {
    let (mut a, mut e) = (0u64, 0u64);
    for i in idx {
        a += counts[i].0;
        e += counts[i].1;
    }
    if a == 0 {
        0.0
    } else {
        (a - e) as f64 / a as f64
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let k = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[k]
}

/// False-positive fraction per anisotropy level with a paired bootstrap over
/// rays (`resamples` draws) for each consecutive pair of levels.
pub fn isotropy_sweep(levels: &[f64], template: &SweepTemplate, rays: usize, resamples: usize) -> Result<SweepResult> {
    if levels.is_empty() || rays == 0 {
        return Err(Error::InvalidParameter("need at least one level and one ray".into()));
    }
    let ray_set = sweep_rays(rays, template.seed);
    let counts: Vec<Vec<(u64, u64)>> =
        levels.iter().map(|&a| ray_hit_counts(&template.scene(a)?, &ray_set)).collect::<Result<_>>()?;

    let mut r = rng(template.seed.wrapping_add(1));
    let draws: Vec<Vec<usize>> = (0..resamples).map(|_| (0..rays).map(|_| r.gen_range(0..rays)).collect()).collect();
    let boot = |c: &[(u64, u64)]| -> Vec<f64> { draws.iter().map(|d| fraction(c, d.iter().copied())).collect() };
    let boots: Vec<Vec<f64>> = counts.iter().map(|c| boot(c)).collect();

    let points = levels
        .iter()
        .zip(&counts)
        .zip(&boots)
        .map(|((&a, c), b)| {
            let mut sorted = b.clone();
            sorted.sort_by(f64::total_cmp);
            let (ci_low, ci_high) =
                if sorted.is_empty() { (f64::NAN, f64::NAN) } else { (percentile(&sorted, 0.025), percentile(&sorted, 0.975)) };
            SweepPoint {
                anisotropy: a,
                aabb_hits: c.iter().map(|x| x.0).sum(),
                ellipsoid_hits: c.iter().map(|x| x.1).sum(),
                false_positive_fraction: fraction(c, 0..rays),
                ci_low,
                ci_high,
            }
        })
        .collect();
    let increasing = boots
        .windows(2)
        .map(|w| {
            let mut diff: Vec<f64> = w[1].iter().zip(&w[0]).map(|(hi, lo)| hi - lo).collect();
            diff.sort_by(f64::total_cmp);
            !diff.is_empty() && percentile(&diff, 0.025) > 0.0
        })
        .collect();
    Ok(SweepResult { points, increasing })
}

// ---------------------------------------------------------------------------
// Locality
// ---------------------------------------------------------------------------

pub const LOCALITY_NEIGHBORS: usize = 8;

/// Mean storage distance `|pos_i - pos_j|` over each point's `k = 8`
/// nearest spatial neighbours, where `perm[new] = old` gives the storage
/// order of `means`.
pub fn locality_metric(means: &[Vec3], perm: &[usize]) -> Result<f64> {
    let n = means.len();
    if perm.len() != n {
        return Err(Error::InvalidParameter("permutation length mismatch".into()));
    }
    let mut pos = vec![usize::MAX; n];
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || pos[old] != usize::MAX {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
        pos[old] = new;
    }
    if n < 2 {
        return Ok(0.0);
    }
    let k = LOCALITY_NEIGHBORS.min(n - 1);
    let mut total = 0.0;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        dists.extend((0..n).filter(|&j| j != i).map(|j| ((means[j] - means[i]).norm_squared(), j)));
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &dists[..k] {
            total += pos[i].abs_diff(pos[j]) as f64;
        }
    }
    Ok(total / (n * k) as f64)
}

/// Locality of the scene's current storage order.
pub fn scene_locality(scene: &Scene) -> Result<f64> {
    let n = scene.len();
    locality_metric(&scene.means(), &(0..n).collect::<Vec<_>>())
}
