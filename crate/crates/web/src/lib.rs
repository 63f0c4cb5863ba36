//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exported: rendering a procedural scene from an
//! orbiting camera, the adaptive step curve, and the anisotropy sweep of
//! box false positives. Each has a plain Rust counterpart so it can be
//! tested natively.

use wasm_bindgen::prelude::*;

use gsray::bench::{isotropy_sweep, SweepTemplate};
use gsray::renderer::{render_image, segment_step, RenderConfig, SamplingMode};
use gsray::scene_io::{gen_test_scene, GenSpec, SceneKind};
use gsray::{Camera, Scene, Vec3};

/// One rendered frame with its work counters.
#[wasm_bindgen]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    samples_per_ray: f64,
    node_visits_per_ray: f64,
    false_positive_fraction: f64,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// sRGB bytes, four per pixel, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter, js_name = samplesPerRay)]
    pub fn samples_per_ray(&self) -> f64 {
        self.samples_per_ray
    }

    #[wasm_bindgen(getter, js_name = nodeVisitsPerRay)]
    pub fn node_visits_per_ray(&self) -> f64 {
        self.node_visits_per_ray
    }

    #[wasm_bindgen(getter, js_name = falsePositiveFraction)]
    pub fn false_positive_fraction(&self) -> f64 {
        self.false_positive_fraction
    }
}

/// A generated scene kept alive between renders.
#[wasm_bindgen]
pub struct Viewer {
    scene: Scene,
}

impl Viewer {
    pub fn build(kind: &str, count: usize, seed: u64, anisotropy: f64) -> gsray::Result<Viewer> {
        let kind: SceneKind = kind.parse()?;
        Ok(Viewer { scene: gen_test_scene(&GenSpec::new(kind, count, seed, anisotropy))? })
    }

    /// Camera on a sphere of radius 3 around the origin. Angles in degrees.
    pub fn frame(&self, azimuth: f64, elevation: f64, size: usize, adaptive: bool, ess: bool) -> gsray::Result<Frame> {
        let (az, el) = (azimuth.to_radians(), elevation.clamp(-89.0, 89.0).to_radians());
        let eye = Vec3::new(az.sin() * el.cos(), -el.sin(), -az.cos() * el.cos()) * 3.0;
        let cam = Camera::look_at(eye, Vec3::zeros(), -Vec3::y(), size as f64, size, size)?;
        let cfg = RenderConfig {
            mode: if adaptive { SamplingMode::Adaptive } else { SamplingMode::Uniform },
            empty_space_skipping: ess,
            step: 0.005,
            ..RenderConfig::default()
        };
        let (img, stats) = render_image(&self.scene, &cam, &cfg)?;
        let per_ray = |v: u64| v as f64 / stats.rays.max(1) as f64;
        Ok(Frame {
            width: img.width,
            height: img.height,
            rgba: img.to_srgb8_rgba(),
            samples_per_ray: stats.samples_per_ray(),
            node_visits_per_ray: per_ray(stats.node_visits),
            false_positive_fraction: stats.false_positive_fraction(),
        })
    }
}

fn js_err(e: gsray::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Viewer {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, count: usize, seed: u64, anisotropy: f64) -> Result<Viewer, JsError> {
        Self::build(kind, count, seed, anisotropy).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn primitives(&self) -> usize {
        self.scene.len()
    }

    pub fn render(&self, azimuth: f64, elevation: f64, size: usize, adaptive: bool, ess: bool) -> Result<Frame, JsError> {
        self.frame(azimuth, elevation, size, adaptive, ess).map_err(js_err)
    }
}

/// Segment length `N_s·Δt(d, T)` at `points` distances evenly spread over
/// `[0, max_distance]`, for a fixed transmittance.
pub fn step_curve(transmittance: f64, beta: f64, max_distance: f64, points: usize) -> Vec<f64> {
    let cfg = RenderConfig { beta, ..RenderConfig::default() };
    let denom = points.saturating_sub(1).max(1) as f64;
    (0..points).map(|i| segment_step(&cfg, max_distance * i as f64 / denom, transmittance)).collect()
}

#[wasm_bindgen(js_name = segmentStepCurve)]
pub fn segment_step_curve(transmittance: f64, beta: f64, max_distance: f64, points: usize) -> Vec<f64> {
    step_curve(transmittance, beta, max_distance, points)
}

/// Flattened `[a, fraction, ci_low, ci_high]` per anisotropy level.
pub fn sweep(levels: &[f64], rays: usize, resamples: usize, seed: u64) -> gsray::Result<Vec<f64>> {
    let template = SweepTemplate { count: 200, seed, ..SweepTemplate::default() };
    let res = isotropy_sweep(levels, &template, rays, resamples)?;
    Ok(res.points.iter().flat_map(|p| [p.anisotropy, p.false_positive_fraction, p.ci_low, p.ci_high]).collect())
}

#[wasm_bindgen(js_name = isotropyCurve)]
pub fn isotropy_curve(levels: Vec<f64>, rays: usize, resamples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    sweep(&levels, rays, resamples, seed).map_err(js_err)
}
