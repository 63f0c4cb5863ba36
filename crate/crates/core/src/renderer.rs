//! Segment-buffered volume ray marching.
//!
//! A ray is integrated segment by segment. Each segment holds a fixed
//! number of samples; the primitives overlapping the segment are gathered
//! once from the BVH and reused for every sample in it. With empty-space
//! skipping enabled, a closest-hit query jumps the segment origin over
//! regions that no truncation ellipsoid reaches. In adaptive mode the
//! segment length grows with distance from the camera and with accumulated
//! opacity.

use serde::{Deserialize, Serialize};

use crate::appearance::eval_radiance;
use crate::camera::{Camera, Ray};
use crate::image::Image;
use crate::spatial::{HitBuffer, TraversalStats, DEFAULT_HIT_CAPACITY};
use crate::{Error, Result, Rgb, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Uniform,
    Adaptive,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::InvalidParameter(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Uniform step `Δt`.
    pub step: f64,
    /// Samples per segment `N_s`.
    pub samples_per_segment: usize,
    /// Early-termination threshold `T_ε`.
    pub transmittance_eps: f64,
    pub mode: SamplingMode,
    pub beta: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub empty_space_skipping: bool,
    pub tile_size: usize,
    pub background: [f64; 3],
    pub hit_capacity: usize,
    pub t_near: f64,
    pub t_far: f64,
    /// Worker threads for [`render_image`]; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step: 0.0025,
            samples_per_segment: 16,
            transmittance_eps: 1e-4,
            mode: SamplingMode::Uniform,
            beta: 1024.0,
            step_min: 0.005,
            step_max: 0.02,
            empty_space_skipping: true,
            tile_size: 16,
            background: [0.0; 3],
            hit_capacity: DEFAULT_HIT_CAPACITY,
            t_near: 0.0,
            t_far: 1e3,
            threads: None,
        }
    }
}

impl RenderConfig {
    pub fn adaptive() -> Self {
        Self { mode: SamplingMode::Adaptive, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.step > 0.0) {
            return bad("step must be > 0");
        }
        if self.samples_per_segment == 0 {
            return bad("samples_per_segment must be >= 1");
        }
        if !(self.transmittance_eps > 0.0 && self.transmittance_eps < 1.0) {
            return bad("transmittance_eps must lie in (0, 1)");
        }
        if !(self.step_min > 0.0 && self.step_min <= self.step_max) {
            return bad("need 0 < step_min <= step_max");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if self.tile_size == 0 || self.hit_capacity == 0 {
            return bad("tile_size and hit_capacity must be >= 1");
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1");
        }
        Ok(())
    }

    pub fn background_rgb(&self) -> Rgb {
        Rgb::from(self.background)
    }
}

/// Work counters for one or more rays. All fields add under merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub rays: u64,
    pub samples: u64,
    pub segments_processed: u64,
    pub segments_empty: u64,
    pub closest_hit_calls: u64,
    pub node_visits: u64,
    pub aabb_hits: u64,
    pub ellipsoid_hits: u64,
    /// Segments that had to be split because the hit buffer overflowed.
    pub overflow_splits: u64,
}

impl RenderStats {
    pub fn false_positives(&self) -> u64 {
        self.aabb_hits.saturating_sub(self.ellipsoid_hits)
    }

    pub fn false_positive_fraction(&self) -> f64 {
        if self.aabb_hits == 0 {
            0.0
        } else {
            self.false_positives() as f64 / self.aabb_hits as f64
        }
    }

    pub fn samples_per_ray(&self) -> f64 {
        if self.rays == 0 {
            0.0
        } else {
            self.samples as f64 / self.rays as f64
        }
    }

    fn absorb(&mut self, t: TraversalStats) {
        self.node_visits += t.node_visits;
        self.aabb_hits += t.aabb_hits;
        self.ellipsoid_hits += t.ellipsoid_hits;
    }
}

impl std::ops::AddAssign for RenderStats {
    fn add_assign(&mut self, o: Self) {
        self.rays += o.rays;
        self.samples += o.samples;
        self.segments_processed += o.segments_processed;
        self.segments_empty += o.segments_empty;
        self.closest_hit_calls += o.closest_hit_calls;
        self.node_visits += o.node_visits;
        self.aabb_hits += o.aabb_hits;
        self.ellipsoid_hits += o.ellipsoid_hits;
        self.overflow_splits += o.overflow_splits;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayOutput {
    /// Accumulated colour including the background term `T_exit·bg`.
    pub color: Rgb,
    /// Transmittance when marching stopped.
    pub transmittance: f64,
    pub stats: RenderStats,
}

/// Segment length `N_s·min(max(d/β, Δt_min)·T^{-1/3}, Δt_max)`.
///
/// `T` is clamped below at `T_ε` and the cube root is taken as
/// `exp(-ln(T)/3)`.
pub fn segment_step(cfg: &RenderConfig, distance: f64, transmittance: f64) -> f64 {
    let t = transmittance.clamp(cfg.transmittance_eps, 1.0);
    let inv_cbrt = (-t.ln() / 3.0).exp();
    let base = (distance / cfg.beta).max(cfg.step_min);
    cfg.samples_per_segment as f64 * (base * inv_cbrt).min(cfg.step_max)
}

/// Per-ray compositing state.
struct Accum {
    color: Rgb,
    transmittance: f64,
    done: bool,
}

/// Radiance cache for the primitives in the current hit buffer.
struct SegmentColors {
    colors: Vec<Option<Rgb>>,
}

impl SegmentColors {
    fn new() -> Self {
        Self { colors: Vec::with_capacity(DEFAULT_HIT_CAPACITY) }
    }

    fn reset(&mut self, n: usize) {
        self.colors.clear();
        self.colors.resize(n, None);
    }
}

/// Composites samples `t_k = origin_t + (k + ½)·dt` for `k` in `range`
/// using the primitives in `active` (ascending id order). Samples at or
/// beyond `t_far` are discarded.
#[allow(clippy::too_many_arguments)]
fn composite_samples(
    scene: &Scene,
    ray: &Ray,
    origin_t: f64,
    dt: f64,
    range: std::ops::Range<u64>,
    active: &[u32],
    cache: &mut SegmentColors,
    eps: f64,
    acc: &mut Accum,
    stats: &mut RenderStats,
) {
    cache.reset(active.len());
    for k in range {
        let t = origin_t + (k as f64 + 0.5) * dt;
        if t >= ray.t_far {
            acc.done = true;
            return;
        }
        let x = ray.at(t);
        stats.samples += 1;
        let mut sigma = 0.0;
        let mut weighted = Rgb::zeros();
        for (j, &idx) in active.iter().enumerate() {
            if let Some(s) = scene.truncated_density(idx as usize, &x) {
                let c = *cache.colors[j].get_or_insert_with(|| eval_radiance(&scene.primitives()[idx as usize].appearance, &ray.dir));
                sigma += s;
                weighted += c * s;
            }
        }
        if sigma > 0.0 {
            let alpha = -(-sigma * dt).exp_m1();
            acc.color += (weighted / sigma) * (alpha * acc.transmittance);
            acc.transmittance *= (-sigma * dt).exp();
        }
        if acc.transmittance <= eps {
            acc.done = true;
            return;
        }
    }
}

/// Gathers primitives for the sample range and composites it, halving the
/// range while the hit buffer overflows. A single sample that still
/// overflows is evaluated against an unbounded list.
#[allow(clippy::too_many_arguments)]
fn process_range(
    scene: &Scene,
    ray: &Ray,
    origin_t: f64,
    dt: f64,
    range: std::ops::Range<u64>,
    buf: &mut HitBuffer,
    cache: &mut SegmentColors,
    cfg: &RenderConfig,
    acc: &mut Accum,
    stats: &mut RenderStats,
) {
    let lo = origin_t + range.start as f64 * dt;
    let hi = origin_t + range.end as f64 * dt;
    let mut trav = TraversalStats::default();
    let res = scene.collect_segment(&ray.origin, &ray.dir, lo, hi, buf, &mut trav);
    stats.absorb(trav);
    match res {
        Ok(_) => composite_samples(scene, ray, origin_t, dt, range, buf.as_slice(), cache, cfg.transmittance_eps, acc, stats),
        Err(_) if range.end - range.start > 1 => {
            stats.overflow_splits += 1;
            let mid = range.start + (range.end - range.start) / 2;
            process_range(scene, ray, origin_t, dt, range.start..mid, buf, cache, cfg, acc, stats);
            if !acc.done {
                process_range(scene, ray, origin_t, dt, mid..range.end, buf, cache, cfg, acc, stats);
            }
        }
        Err(_) => {
            stats.overflow_splits += 1;
            let mut big = HitBuffer::new(scene.len().max(1));
            let mut trav = TraversalStats::default();
            scene
                .collect_segment(&ray.origin, &ray.dir, lo, hi, &mut big, &mut trav)
                .expect("buffer sized to the scene cannot overflow");
            stats.absorb(trav);
            composite_samples(scene, ray, origin_t, dt, range, big.as_slice(), cache, cfg.transmittance_eps, acc, stats);
        }
    }
}

/// Whether any primitive box overlaps `[lo, hi]`; counts as one segment
/// query. Overflow means the segment is certainly occupied.
fn segment_occupied(scene: &Scene, ray: &Ray, lo: f64, hi: f64, buf: &mut HitBuffer, stats: &mut RenderStats) -> bool {
    let mut trav = TraversalStats::default();
    let res = scene.collect_segment(&ray.origin, &ray.dir, lo, hi, buf, &mut trav);
    stats.absorb(trav);
    !matches!(res, Ok(0))
}

fn closest(scene: &Scene, ray: &Ray, lo: f64, stats: &mut RenderStats) -> Option<f64> {
    stats.closest_hit_calls += 1;
    let mut trav = TraversalStats::default();
    let hit = scene.closest_hit(&ray.origin, &ray.dir, lo, ray.t_far, &mut trav);
    stats.absorb(trav);
    hit
}

/// Integrates one ray.
///
/// Uniform mode samples the fixed grid `t_near + (k + ½)·Δt`; empty-space
/// skipping moves the segment start to the grid point just before the next
/// closest hit, so skipping changes which empty samples are visited but
/// never the value of an occupied one. Adaptive mode sizes each segment with
/// [`segment_step`] and restarts its grid at every closest hit.
pub fn march_ray(scene: &Scene, ray: &Ray, cfg: &RenderConfig) -> RayOutput {
    let mut stats = RenderStats { rays: 1, ..Default::default() };
    let background = cfg.background_rgb();
    let mut acc = Accum { color: Rgb::zeros(), transmittance: 1.0, done: false };
    if ray.t_near < ray.t_far && !scene.is_empty() {
        let mut buf = HitBuffer::new(cfg.hit_capacity);
        let mut cache = SegmentColors::new();
        match cfg.mode {
            SamplingMode::Uniform => march_uniform(scene, ray, cfg, &mut buf, &mut cache, &mut acc, &mut stats),
            SamplingMode::Adaptive => march_adaptive(scene, ray, cfg, &mut buf, &mut cache, &mut acc, &mut stats),
        }
    }
    RayOutput { color: acc.color + background * acc.transmittance, transmittance: acc.transmittance, stats }
}

fn march_uniform(
    scene: &Scene,
    ray: &Ray,
    cfg: &RenderConfig,
    buf: &mut HitBuffer,
    cache: &mut SegmentColors,
    acc: &mut Accum,
    stats: &mut RenderStats,
) {
    let dt = cfg.step;
    let ns = cfg.samples_per_segment as u64;
    let t0 = ray.t_near;
    let grid = |m: u64| t0 + m as f64 * dt;
    // One sample of slack below the hit absorbs rounding in the floor.
    let snap = |t: f64, floor: u64| -> u64 { floor.max((((t - t0) / dt).floor().max(0.0) as u64).saturating_sub(1)) };

    let mut m: u64 = 0;
    if cfg.empty_space_skipping {
        match closest(scene, ray, t0, stats) {
            Some(t) => m = snap(t, 0),
            None => return,
        }
    }
    while grid(m) < ray.t_far && acc.transmittance > cfg.transmittance_eps && !acc.done {
        let (lo, hi) = (grid(m), grid(m + ns));
        if !segment_occupied(scene, ray, lo, hi, buf, stats) {
            stats.segments_empty += 1;
            if !cfg.empty_space_skipping {
                // Without skipping, the empty samples are still marched.
                composite_samples(scene, ray, t0, dt, m..m + ns, &[], cache, cfg.transmittance_eps, acc, stats);
                m += ns;
                continue;
            }
            m += ns;
            match closest(scene, ray, grid(m), stats) {
                Some(t) => m = snap(t, m),
                None => return,
            }
            continue;
        }
        stats.segments_processed += 1;
        process_range(scene, ray, t0, dt, m..m + ns, buf, cache, cfg, acc, stats);
        m += ns;
    }
}

fn march_adaptive(
    scene: &Scene,
    ray: &Ray,
    cfg: &RenderConfig,
    buf: &mut HitBuffer,
    cache: &mut SegmentColors,
    acc: &mut Accum,
    stats: &mut RenderStats,
) {
    let ns = cfg.samples_per_segment as u64;
    let mut ts = ray.t_near;
    if cfg.empty_space_skipping {
        match closest(scene, ray, ts, stats) {
            Some(t) => ts = t,
            None => return,
        }
    }
    while ts < ray.t_far && acc.transmittance > cfg.transmittance_eps && !acc.done {
        let seg = segment_step(cfg, ts.abs(), acc.transmittance);
        let dt = seg / ns as f64;
        if !segment_occupied(scene, ray, ts, ts + seg, buf, stats) {
            stats.segments_empty += 1;
            if !cfg.empty_space_skipping {
                composite_samples(scene, ray, ts, dt, 0..ns, &[], cache, cfg.transmittance_eps, acc, stats);
                ts += seg;
                continue;
            }
            ts += seg;
            match closest(scene, ray, ts, stats) {
                Some(t) => ts = t,
                None => return,
            }
            continue;
        }
        stats.segments_processed += 1;
        process_range(scene, ray, ts, dt, 0..ns, buf, cache, cfg, acc, stats);
        ts += seg;
    }
}

/// Dense midpoint quadrature of the volume rendering integral over
/// `[t_near, t_far]` with step `fine_step`: no BVH, no skipping, no early
/// termination. Each primitive is evaluated at every grid sample inside its
/// ellipsoid interval; samples outside all intervals carry no density, so
/// the loop starts at the first interval and stops after the last.
pub fn reference_integrate(scene: &Scene, ray: &Ray, fine_step: f64, background: Rgb) -> Rgb {
    let mut candidates: Vec<u32> = Vec::new();
    for i in 0..scene.len() as u32 {
        if let Some((t0, t1)) = scene.ellipsoid_interval(i as usize, &ray.origin, &ray.dir) {
            if t1 >= ray.t_near && t0 <= ray.t_far {
                candidates.push(i);
            }
        }
    }
    scene.sort_by_id(&mut candidates);
    // Padded so rounding in the interval never hides a sample the density test accepts.
    let spans: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&i| {
            let (t0, t1) = scene.ellipsoid_interval(i as usize, &ray.origin, &ray.dir).expect("candidate has an interval");
            let pad = 1e-9 * (1.0 + t0.abs().max(t1.abs()));
            (t0 - pad, t1 + pad)
        })
        .collect();
    let colors: Vec<Rgb> = candidates.iter().map(|&i| eval_radiance(&scene.primitives()[i as usize].appearance, &ray.dir)).collect();
    let mut color = Rgb::zeros();
    let mut trans = 1.0;
    let first = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let last = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max).min(ray.t_far);
    let mut k: u64 = if first > ray.t_near { ((first - ray.t_near) / fine_step - 1.0).max(0.0) as u64 } else { 0 };
    loop {
        let t = ray.t_near + (k as f64 + 0.5) * fine_step;
        if t >= ray.t_far || t > last {
            break;
        }
        let x = ray.at(t);
        let mut sigma = 0.0;
        let mut weighted = Rgb::zeros();
        for (j, &idx) in candidates.iter().enumerate() {
            if t < spans[j].0 || t > spans[j].1 {
                continue;
            }
            if let Some(s) = scene.truncated_density(idx as usize, &x) {
                sigma += s;
                weighted += colors[j] * s;
            }
        }
        if sigma > 0.0 {
            let alpha = -(-sigma * fine_step).exp_m1();
            color += (weighted / sigma) * (alpha * trans);
            trans *= (-sigma * fine_step).exp();
        }
        k += 1;
    }
    color + background * trans
}

/// Primary ray for a pixel, with the far bound clipped to the scene box.
pub fn camera_ray(scene: &Scene, camera: &Camera, cfg: &RenderConfig, px: usize, py: usize) -> Ray {
    scene.clip_far(&camera.ray(px, py, cfg.t_near, cfg.t_far))
}

/// Pixel rectangles in tile-major order.
pub fn tiles(width: usize, height: usize, tile: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for ty in (0..height).step_by(tile) {
        for tx in (0..width).step_by(tile) {
            out.push((tx, ty, (tx + tile).min(width), (ty + tile).min(height)));
        }
    }
    out
}

fn render_tiles<F>(camera: &Camera, tile: usize, per_pixel: F) -> (Image, RenderStats)
where
    F: Fn(usize, usize) -> (Rgb, RenderStats) + Sync,
{
    let rects = tiles(camera.width, camera.height, tile);
    let work = |&(x0, y0, x1, y1): &(usize, usize, usize, usize)| {
        let mut px = Vec::with_capacity((x1 - x0) * (y1 - y0));
        let mut stats = RenderStats::default();
        for y in y0..y1 {
            for x in x0..x1 {
                let (c, s) = per_pixel(x, y);
                stats += s;
                px.push(c);
            }
        }
        (px, stats)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(Vec<Rgb>, RenderStats)> = {
        use rayon::prelude::*;
        rects.par_iter().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(Vec<Rgb>, RenderStats)> = rects.iter().map(work).collect();

    let mut image = Image::new(camera.width, camera.height);
    let mut stats = RenderStats::default();
    for (&(x0, y0, x1, _), (px, s)) in rects.iter().zip(results) {
        stats += s;
        let w = x1 - x0;
        for (i, c) in px.into_iter().enumerate() {
            image.set(x0 + i % w, y0 + i / w, c);
        }
    }
    (image, stats)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(f())
}

/// Renders every pixel with [`march_ray`], dispatching rays tile by tile.
/// Pixel values do not depend on tile size or thread count.
pub fn render_image(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> Result<(Image, RenderStats)> {
    cfg.validate()?;
    camera.validate()?;
    with_threads(cfg.threads, || {
        render_tiles(camera, cfg.tile_size, |x, y| {
            let out = march_ray(scene, &camera_ray(scene, camera, cfg, x, y), cfg);
            (out.color, out.stats)
        })
    })
}

/// Renders with [`reference_integrate`] along the same primary rays.
pub fn render_reference(scene: &Scene, camera: &Camera, cfg: &RenderConfig, fine_step: f64) -> Result<Image> {
    cfg.validate()?;
    camera.validate()?;
    let bg = cfg.background_rgb();
    with_threads(cfg.threads, || {
        render_tiles(camera, cfg.tile_size, |x, y| {
            (reference_integrate(scene, &camera_ray(scene, camera, cfg, x, y), fine_step, bg), RenderStats::default())
        })
        .0
    })
}

/// Straight-line optical depth of the untruncated Gaussian `σ̃·G` through
/// its center: `σ̃·s·√(2π)` for an isotropic scale `s`.
pub fn isotropic_center_optical_depth(density: f64, scale: f64) -> f64 {
    density * scale * (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceCoeffs;
    use crate::geometry::GaussianShape;
    use crate::sampling::{random_quat_wxyz, rng, uniform_in_box};
    use crate::scene::Primitive;
    use crate::Vec3;
    use rand::Rng;

    fn single(density: f64, scale: f64, sigma_eps: f64) -> Scene {
        let g = GaussianShape::isotropic(Vec3::zeros(), scale, density).unwrap();
        Scene::new(vec![Primitive { id: 0, shape: g, appearance: AppearanceCoeffs::constant(Rgb::repeat(1.0)) }], sigma_eps)
            .unwrap()
    }

    fn cloud(n: usize, seed: u64) -> Scene {
        let mut r = rng(seed);
        let prims = (0..n)
            .map(|i| Primitive {
                id: i as u32,
                shape: GaussianShape::new(
                    uniform_in_box(&mut r, Vec3::repeat(-0.5), Vec3::repeat(0.5)),
                    random_quat_wxyz(&mut r),
                    Vec3::new(r.gen_range(0.02..0.08), r.gen_range(0.02..0.08), r.gen_range(0.02..0.15)),
                    r.gen_range(1.0..20.0),
                )
                .unwrap(),
                appearance: AppearanceCoeffs::constant(Rgb::new(r.gen(), r.gen(), r.gen())),
            })
            .collect();
        Scene::new(prims, 0.01).unwrap()
    }

    #[test]
    fn segment_step_examples() {
        let cfg = RenderConfig { samples_per_segment: 16, ..RenderConfig::adaptive() };
        assert_eq!(segment_step(&cfg, 0.0, 1.0), 16.0 * 0.005);
        assert_eq!(segment_step(&cfg, 1e9, 0.9), 16.0 * 0.02);
        assert!((segment_step(&cfg, 10.24, 0.125) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn empty_scene_returns_background() {
        let scene = Scene::empty(0.01).unwrap();
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.0, 10.0).unwrap();
        let out = march_ray(&scene, &ray, &cfg);
        assert_eq!(out.color, Rgb::new(0.1, 0.2, 0.3));
        assert_eq!(out.transmittance, 1.0);
        assert_eq!(out.stats.samples, 0);
        assert_eq!(reference_integrate(&scene, &ray, 0.01, cfg.background_rgb()), Rgb::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn degenerate_ray_returns_background() {
        let scene = single(1.0, 0.1, 1e-4);
        let cfg = RenderConfig { background: [0.5; 3], ..Default::default() };
        let ray = Ray { origin: Vec3::zeros(), dir: Vec3::z(), t_near: 2.0, t_far: 1.0 };
        assert_eq!(march_ray(&scene, &ray, &cfg).color, Rgb::repeat(0.5));
    }

    #[test]
    fn matches_reference_on_same_grid() {
        let scene = cloud(40, 1);
        let cfg = RenderConfig { empty_space_skipping: false, transmittance_eps: 1e-15, step: 0.01, ..Default::default() };
        let mut r = rng(2);
        for _ in 0..50 {
            let o = Vec3::new(r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), -2.0);
            let ray = scene.clip_far(&Ray::new(o, Vec3::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), 1.0), 0.0, 10.0).unwrap());
            let a = march_ray(&scene, &ray, &cfg).color;
            let b = reference_integrate(&scene, &ray, cfg.step, Rgb::zeros());
            assert!((a - b).amax() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ess_is_exact_in_uniform_mode() {
        let scene = cloud(60, 3);
        let mut r = rng(4);
        for _ in 0..100 {
            let o = Vec3::new(r.gen_range(-0.4..0.4), r.gen_range(-0.4..0.4), -3.0);
            let ray = scene.clip_far(&Ray::new(o, Vec3::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), 1.0), 0.0, 10.0).unwrap());
            let on = march_ray(&scene, &ray, &RenderConfig::default());
            let off = march_ray(&scene, &ray, &RenderConfig { empty_space_skipping: false, ..Default::default() });
            assert!((on.color - off.color).amax() <= 1e-12);
            assert!(on.stats.samples <= off.stats.samples);
        }
    }

    #[test]
    fn opacity_weights_sum_to_one_minus_exit_transmittance() {
        let scene = cloud(30, 5);
        let mut white = scene.clone().into_primitives();
        for p in white.iter_mut() {
            p.appearance = AppearanceCoeffs::constant(Rgb::repeat(1.0));
        }
        let white = Scene::new(white, 0.01).unwrap();
        let cfg = RenderConfig { transmittance_eps: 1e-12, ..Default::default() };
        let mut r = rng(6);
        for _ in 0..50 {
            let o = Vec3::new(r.gen_range(-0.4..0.4), r.gen_range(-0.4..0.4), -3.0);
            let ray = white.clip_far(&Ray::new(o, Vec3::z(), 0.0, 10.0).unwrap());
            let out = march_ray(&white, &ray, &cfg);
            assert!(out.transmittance > 0.0 && out.transmittance <= 1.0);
            for c in out.color.iter() {
                assert!((c - (1.0 - out.transmittance)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn early_termination_error_is_bounded() {
        let scene = single(200.0, 0.2, 1e-4);
        let ray = scene.clip_far(&Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z(), 0.0, 10.0).unwrap());
        let eps = 1e-3;
        let stopped = march_ray(&scene, &ray, &RenderConfig { transmittance_eps: eps, ..Default::default() });
        let full = march_ray(&scene, &ray, &RenderConfig { transmittance_eps: 1e-300, ..Default::default() });
        assert!(stopped.transmittance <= eps);
        assert!((stopped.color - full.color).amax() <= eps);
        assert!(stopped.stats.samples < full.stats.samples);
    }

    #[test]
    fn single_gaussian_transmittance() {
        let scene = single(1.0, 0.1, 1e-4);
        let ray = Ray::new(Vec3::new(0.0, 0.0, -1.0), Vec3::z(), 0.0, 2.0).unwrap();
        let cfg = RenderConfig { step: 0.0005, ..Default::default() };
        let out = march_ray(&scene, &ray, &cfg);
        let expected = (-isotropic_center_optical_depth(1.0, 0.1)).exp();
        assert!((out.transmittance - expected).abs() < 1e-3, "{} vs {expected}", out.transmittance);
    }

    #[test]
    fn overflow_split_preserves_output() {
        let scene = cloud(200, 7);
        let ray = scene.clip_far(&Ray::new(Vec3::new(0.0, 0.0, -3.0), Vec3::z(), 0.0, 10.0).unwrap());
        let big = march_ray(&scene, &ray, &RenderConfig { hit_capacity: 1024, ..Default::default() });
        let small = march_ray(&scene, &ray, &RenderConfig { hit_capacity: 1, ..Default::default() });
        assert!(small.stats.overflow_splits > 0);
        assert_eq!(big.color, small.color);
    }

    #[test]
    fn adaptive_uses_fewer_samples_far_away() {
        let scene = cloud(40, 8);
        let near = Ray::new(Vec3::new(0.0, 0.0, -1.0), Vec3::z(), 0.0, 1e3).unwrap();
        let far = Ray::new(Vec3::new(0.0, 0.0, -200.0), Vec3::z(), 0.0, 1e3).unwrap();
        let cfg = RenderConfig::adaptive();
        let a = march_ray(&scene, &scene.clip_far(&near), &cfg).stats.samples;
        let b = march_ray(&scene, &scene.clip_far(&far), &cfg).stats.samples;
        assert!(b < a, "far {b} vs near {a}");
    }

    #[test]
    fn tiles_cover_image() {
        let t = tiles(37, 20, 16);
        assert_eq!(t.len(), 6);
        let area: usize = t.iter().map(|(x0, y0, x1, y1)| (x1 - x0) * (y1 - y0)).sum();
        assert_eq!(area, 37 * 20);
    }

    #[test]
    fn render_independent_of_tiles_and_threads() {
        let scene = cloud(30, 9);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), 24.0, 20, 17).unwrap();
        let (a, sa) = render_image(&scene, &cam, &RenderConfig { tile_size: 1, threads: Some(1), ..Default::default() }).unwrap();
        let (b, sb) = render_image(&scene, &cam, &RenderConfig { tile_size: 16, threads: Some(4), ..Default::default() }).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(sa, sb);
    }

    #[test]
    fn config_validation() {
        assert!(RenderConfig { samples_per_segment: 0, ..Default::default() }.validate().is_err());
        assert!(RenderConfig { transmittance_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(RenderConfig { step_min: 0.1, step_max: 0.01, ..Default::default() }.validate().is_err());
        RenderConfig::default().validate().unwrap();
    }
}
