use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gsray::bench::{parse_pipelines, run_pipeline_matrix, BenchConfig};
use gsray::densify::{analyze, default_fd_step, report_csv, write_density_ply, DensifyConfig, LossConfig};
use gsray::geometry::{audit, GeometryAudit};
use gsray::image::Image;
use gsray::renderer::{render_image, RenderConfig, RenderStats, SamplingMode};
use gsray::scene_io::{gen_test_scene, load_cameras, load_scene, orbit_cameras, save_cameras, save_scene, GenSpec, LoadOptions, SceneKind};
use gsray::{Camera, Scene};

/// Ray marcher and analysis tools for truncated-Gaussian radiance fields.
///
/// Exit status is 0 on success, 2 on a usage error and 1 when a command
/// fails at run time.
#[derive(Parser, Debug)]
#[command(name = "gsray", version)]
struct Cli {
    /// Worker threads for rendering. Defaults to all cores.
    #[arg(long, global = true, env = "GSRAY_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render every camera to PNG and PFM and write per-view stats JSON.
    Render(RenderArgs),
    /// Compare sampling pipelines and write a CSV (or JSON) report.
    Bench(BenchArgs),
    /// Audit the volume-ratio bound and box witnesses on random shapes.
    GeomCheck(GeomCheckArgs),
    /// Compare the old and distance-weighted densification criteria.
    DensifyAnalyze(DensifyArgs),
    /// Write a procedural test scene and, optionally, orbit cameras.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Scene file (.gsx, or .ply from a splatting trainer).
    #[arg(long)]
    scene: PathBuf,
    /// Camera JSON file.
    #[arg(long)]
    cameras: PathBuf,
    /// Reorder primitives along a Morton curve after loading.
    #[arg(long)]
    morton: bool,
}

#[derive(Args, Debug, Clone)]
struct MarchArgs {
    /// Uniform step length.
    #[arg(long, default_value_t = 0.0025)]
    step: f64,
    /// Samples per segment.
    #[arg(long, default_value_t = 16)]
    samples_per_segment: usize,
    /// Transmittance below which a ray stops.
    #[arg(long, default_value_t = 1e-4)]
    transmittance_eps: f64,
    /// Adaptive sampling rate.
    #[arg(long, default_value_t = 1024.0)]
    beta: f64,
    /// Smallest adaptive step.
    #[arg(long, default_value_t = 0.005)]
    step_min: f64,
    /// Largest adaptive step.
    #[arg(long, default_value_t = 0.02)]
    step_max: f64,
    /// Square tile edge in pixels.
    #[arg(long, default_value_t = 16)]
    tile_size: usize,
    /// Far clipping distance.
    #[arg(long, default_value_t = 1e3)]
    t_far: f64,
    /// Background colour as r,g,b in linear units.
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    background: [f64; 3],
}

impl MarchArgs {
    fn config(&self, threads: Option<u32>) -> RenderConfig {
        RenderConfig {
            step: self.step,
            samples_per_segment: self.samples_per_segment,
            transmittance_eps: self.transmittance_eps,
            beta: self.beta,
            step_min: self.step_min,
            step_max: self.step_max,
            tile_size: self.tile_size,
            t_far: self.t_far,
            background: self.background,
            threads: threads.map(|n| n as usize),
            ..RenderConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    input: SceneArgs,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Sampling mode.
    #[arg(long, default_value = "uniform", value_parser = ["uniform", "adaptive"])]
    mode: String,
    /// Disable empty-space skipping.
    #[arg(long)]
    no_ess: bool,
    #[command(flatten)]
    march: MarchArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    input: SceneArgs,
    /// Comma-separated pipelines: uniform, ess, adaptive, ess+adaptive.
    #[arg(long, default_value = "uniform,ess,adaptive,ess+adaptive")]
    pipelines: String,
    /// Timed runs per pipeline; the median wall time is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Untimed runs before timing.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Reference step is the uniform step divided by this.
    #[arg(long, default_value_t = 8.0)]
    reference_divisor: f64,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    march: MarchArgs,
}

#[derive(Args, Debug)]
struct GeomCheckArgs {
    /// Number of random shapes.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DensifyArgs {
    #[command(flatten)]
    input: SceneArgs,
    /// Target images: a scene file rendered through the same cameras, or a
    /// directory of view_NNNN.pfm files as written by `render`.
    #[arg(long)]
    reference: PathBuf,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a PLY of primitive means with neighbour counts.
    #[arg(long)]
    ply_out: Option<PathBuf>,
    /// Gradient threshold.
    #[arg(long, default_value_t = 0.00015)]
    tau: f64,
    /// Neighbour radius.
    #[arg(long, default_value_t = 0.125)]
    radius: f64,
    /// D-SSIM weight in the image loss.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    /// Finite-difference step. Defaults to 1e-4 of the scene diagonal.
    #[arg(long)]
    fd_step: Option<f64>,
    #[command(flatten)]
    march: MarchArgs,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene kind: single, grid, random-cloud or shell.
    #[arg(long, default_value = "random-cloud")]
    kind: String,
    /// Number of primitives (ignored for single).
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Ratio of largest to smallest scale.
    #[arg(long, default_value_t = 1.0)]
    anisotropy: f64,
    /// Output .gsx file.
    #[arg(long)]
    out: PathBuf,
    /// Also write orbit cameras to this JSON file.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Number of orbit cameras.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Orbit radius.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 64.0)]
    focal: f64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn in_file(path: &Path) -> impl FnOnce(gsray::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn load(input: &SceneArgs) -> Result<(Scene, Vec<Camera>), String> {
    let scene = load_scene(&input.scene, LoadOptions { morton: input.morton }).map_err(in_file(&input.scene))?;
    let cameras = load_cameras(&input.cameras).map_err(in_file(&input.cameras))?;
    Ok((scene, cameras))
}

fn view_name(i: usize, ext: &str) -> String {
    format!("view_{i:04}.{ext}")
}

#[derive(Serialize)]
struct ViewStats {
    view: usize,
    png: String,
    pfm: String,
    wall_time_ms: f64,
    samples_per_ray: f64,
    false_positive_fraction: f64,
    stats: RenderStats,
}

#[derive(Serialize)]
struct RenderReport {
    scene: String,
    primitives: usize,
    config: RenderConfig,
    views: Vec<ViewStats>,
    total: RenderStats,
}

fn cmd_render(a: &RenderArgs, threads: Option<u32>) -> CmdResult {
    let (scene, cameras) = load(&a.input)?;
    let mut cfg = a.march.config(threads);
    cfg.mode = a.mode.parse::<SamplingMode>()?;
    cfg.empty_space_skipping = !a.no_ess;
    fs::create_dir_all(&a.out)?;
    let mut views = Vec::with_capacity(cameras.len());
    let mut total = RenderStats::default();
    for (i, cam) in cameras.iter().enumerate() {
        let start = Instant::now();
        let (img, stats) = render_image(&scene, cam, &cfg)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        img.write_png(&a.out.join(view_name(i, "png")))?;
        img.write_pfm(&a.out.join(view_name(i, "pfm")))?;
        total += stats;
        views.push(ViewStats {
            view: i,
            png: view_name(i, "png"),
            pfm: view_name(i, "pfm"),
            wall_time_ms: ms,
            samples_per_ray: stats.samples_per_ray(),
            false_positive_fraction: stats.false_positive_fraction(),
            stats,
        });
    }
    let report = RenderReport {
        scene: a.input.scene.display().to_string(),
        primitives: scene.len(),
        config: cfg,
        views,
        total,
    };
    fs::write(a.out.join("stats.json"), serde_json::to_string_pretty(&report)?)?;
    eprintln!("rendered {} view(s) to {}", cameras.len(), a.out.display());
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> std::io::Result<()> {
    match out {
        Some(p) => fs::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_bench(a: &BenchArgs, threads: Option<u32>) -> CmdResult {
    let pipelines = parse_pipelines(&a.pipelines)?;
    let (scene, cameras) = load(&a.input)?;
    let cfg = BenchConfig {
        render: a.march.config(threads),
        runs: a.runs,
        warmup: a.warmup,
        reference_divisor: a.reference_divisor,
    };
    let report = run_pipeline_matrix(&scene, &cameras, &pipelines, &cfg)?;
    let text = if a.json { report.to_json()? + "\n" } else { report.to_csv() };
    emit(&text, a.out.as_deref())?;
    Ok(())
}

fn cmd_geom_check(a: &GeomCheckArgs, seed: u64) -> CmdResult {
    let report: GeometryAudit = audit(a.trials, seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("trials: {}", report.trials);
        println!("seed: {}", report.seed);
        println!("max_excess: {:e}", report.max_excess);
        println!("max_violation: {:e}", report.max_violation);
        println!("violations: {}", report.violations);
        println!("max_isotropic_error: {:e}", report.max_isotropic_error);
        println!("max_witness_error: {:e}", report.max_witness_error);
    }
    if !report.passed() {
        return Err(format!("geometry audit failed: {} bound violation(s)", report.violations).into());
    }
    Ok(())
}

fn load_targets(reference: &Path, cameras: &[Camera], cfg: &RenderConfig, morton: bool) -> Result<Vec<Image>, String> {
    if reference.is_dir() {
        return cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let path = reference.join(view_name(i, "pfm"));
                let img = Image::read_pfm(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                if img.width != cam.width || img.height != cam.height {
                    return Err(format!("{}: {}", path.display(), gsray::Error::DimensionMismatch(img.width, img.height, cam.width, cam.height)));
                }
                Ok(img)
            })
            .collect();
    }
    let scene = load_scene(reference, LoadOptions { morton }).map_err(in_file(reference))?;
    cameras.iter().map(|cam| render_image(&scene, cam, cfg).map(|(img, _)| img).map_err(|e| e.to_string())).collect()
}

fn cmd_densify(a: &DensifyArgs, threads: Option<u32>) -> CmdResult {
    let (scene, cameras) = load(&a.input)?;
    let rcfg = a.march.config(threads);
    let targets = load_targets(&a.reference, &cameras, &rcfg, a.input.morton)?;
    let dcfg = DensifyConfig { tau: a.tau, radius: a.radius, ..DensifyConfig::default() };
    let lcfg = LossConfig { lambda: a.lambda, ..LossConfig::default() };
    let h = a.fd_step.unwrap_or_else(|| default_fd_step(&scene));
    let rows = analyze(&scene, &cameras, &targets, &dcfg, &lcfg, &rcfg, h)?;
    emit(&report_csv(&rows), a.out.as_deref())?;
    if let Some(p) = &a.ply_out {
        let values: Vec<f64> = rows.iter().map(|r| r.neighbors as f64).collect();
        write_density_ply(p, &scene.means(), &values)?;
    }
    let (old, new) = (rows.iter().filter(|r| r.old).count(), rows.iter().filter(|r| r.new).count());
    eprintln!("{} primitives: {old} flagged by the old criterion, {new} by the weighted one", rows.len());
    Ok(())
}

fn cmd_gen(a: &GenArgs, seed: u64) -> CmdResult {
    let kind: SceneKind = a.kind.parse()?;
    let scene = gen_test_scene(&GenSpec::new(kind, a.count, seed, a.anisotropy))?;
    save_scene(&scene, &a.out)?;
    if let Some(p) = &a.cameras {
        save_cameras(&orbit_cameras(a.views, a.radius, a.focal, a.width, a.height)?, p)?;
    }
    eprintln!("wrote {} primitive(s) to {}", scene.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Render(a) => cmd_render(a, cli.threads),
        Command::Bench(a) => cmd_bench(a, cli.threads),
        Command::GeomCheck(a) => cmd_geom_check(a, cli.seed),
        Command::DensifyAnalyze(a) => cmd_densify(a, cli.threads),
        Command::Gen(a) => cmd_gen(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
