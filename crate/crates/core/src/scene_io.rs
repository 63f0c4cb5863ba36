//! Scene and camera files, 3DGS PLY ingestion and procedural test scenes.
//!
//! Native `.gsx` layout (all numbers little-endian):
//!
//! ```text
//! b"GSX\0"  u32 header_len  header_len bytes of JSON  f64 sigma_eps
//! count × [id, mean(3), quat wxyz(4), scales(3), density, sh(9×rgb), sg(7×(axis 3, sharpness, rgb))]
//! ```
//!
//! Every record is 88 `f64`s, so saving and loading is bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceCoeffs, SgLobe, SG_LOBES, SH_C0, SH_COEFFS};
use crate::geometry::{GaussianShape, DEFAULT_SIGMA_EPS};
use crate::sampling::{log_uniform, random_quat_wxyz, random_unit, rng, uniform_in_box};
use crate::{Camera, Error, Primitive, Result, Rgb, Scene, Vec3};

pub const GSX_MAGIC: &[u8; 4] = b"GSX\0";
pub const GSX_VERSION: u32 = 1;
pub const RECORD_LEN: usize = 1 + 3 + 4 + 3 + 1 + 3 * SH_COEFFS + 7 * SG_LOBES;

/// Step used to turn splatting opacity into density: `σ̃ = -ln(1-α)/Δt_ref`.
pub const PLY_REFERENCE_STEP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsxHeader {
    pub format: String,
    pub version: u32,
    pub sigma_eps: f64,
    pub count: usize,
    pub record_len: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Reorder storage by Morton code after loading.
    pub morton: bool,
}

fn validation(index: usize, reason: impl Into<String>) -> Error {
    Error::Validation { index, reason: reason.into() }
}

fn encode_record(p: &Primitive, out: &mut Vec<f64>) {
    let s = &p.shape;
    out.push(p.id as f64);
    out.extend(s.mean().iter());
    out.extend(s.quat());
    out.extend(s.scales().iter());
    out.push(s.density());
    for c in &p.appearance.sh {
        out.extend(c.iter());
    }
    for l in &p.appearance.sg {
        out.extend(l.axis.iter());
        out.push(l.sharpness);
        out.extend(l.amplitude.iter());
    }
}

fn decode_record(index: usize, r: &[f64]) -> Result<Primitive> {
    let id = r[0];
    if !(id >= 0.0 && id <= u32::MAX as f64 && id.fract() == 0.0) {
        return Err(validation(index, format!("id {id} is not a u32")));
    }
    let v3 = |i: usize| Vec3::new(r[i], r[i + 1], r[i + 2]);
    if r[1..12].iter().any(|v| !v.is_finite()) {
        return Err(validation(index, "non-finite geometry"));
    }
    let shape = GaussianShape::new(v3(1), [r[4], r[5], r[6], r[7]], v3(8), r[11])
        .map_err(|e| validation(index, e.to_string()))?;
    let mut app = AppearanceCoeffs::zero();
    for (k, c) in app.sh.iter_mut().enumerate() {
        *c = v3(12 + 3 * k);
    }
    let sg0 = 12 + 3 * SH_COEFFS;
    for (k, l) in app.sg.iter_mut().enumerate() {
        let b = sg0 + 7 * k;
        *l = SgLobe { axis: v3(b), sharpness: r[b + 3], amplitude: v3(b + 4) };
    }
    app.validate().map_err(|e| validation(index, e))?;
    Ok(Primitive { id: id as u32, shape, appearance: app })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let header = GsxHeader {
        format: "gsx".into(),
        version: GSX_VERSION,
        sigma_eps: scene.sigma_eps(),
        count: scene.len(),
        record_len: RECORD_LEN,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(GSX_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&scene.sigma_eps().to_le_bytes())?;
    let mut rec = Vec::with_capacity(RECORD_LEN);
    for p in scene.primitives() {
        rec.clear();
        encode_record(p, &mut rec);
        for v in &rec {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn finish(prims: Vec<Primitive>, sigma_eps: f64, opts: LoadOptions) -> Result<Scene> {
    if prims.is_empty() {
        return Err(validation(0, Error::EmptyScene.to_string()));
    }
    let mut scene = Scene::new(prims, sigma_eps)?;
    if opts.morton {
        scene.reorder_by_morton()?;
    }
    Ok(scene)
}

pub fn read_gsx(path: &Path, opts: LoadOptions) -> Result<Scene> {
    let bytes = std::fs::read(path)?;
    let parse = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != GSX_MAGIC {
        return Err(parse("not a gsx file"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8 + hlen..).ok_or_else(|| parse("truncated header"))?;
    let header: GsxHeader = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| parse(&e.to_string()))?;
    if header.version != GSX_VERSION || header.record_len != RECORD_LEN {
        return Err(parse(&format!("unsupported version {} / record length {}", header.version, header.record_len)));
    }
    if body.len() != 8 * (1 + header.count * RECORD_LEN) {
        return Err(parse(&format!("expected {} records, body has {} bytes", header.count, body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let sigma_eps = values[0];
    let prims = values[1..]
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, r)| decode_record(i, r))
        .collect::<Result<Vec<_>>>()?;
    finish(prims, sigma_eps, opts)
}

/// Loads a `.gsx` or 3DGS `.ply` scene, chosen by extension.
pub fn load_scene(path: &Path, opts: LoadOptions) -> Result<Scene> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => read_ply(path, opts),
        _ => read_gsx(path, opts),
    }
}

// ---------------------------------------------------------------------------
// PLY ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(Error::Parse(format!("unsupported PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyVertices {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl PlyVertices {
    fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn parse_ply(reader: impl Read) -> Result<PlyVertices> {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_owned())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Parse("missing ply magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    let mut seen_other = false;
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", f, ..] => return Err(Error::Parse(format!("unsupported PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if seen_other {
                    return Err(Error::Parse("vertex element must come first".into()));
                }
                count = Some(n.parse::<usize>().map_err(|e| Error::Parse(format!("vertex count: {e}")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                in_vertex = false;
                seen_other = true;
            }
            ["property", "list", ..] if in_vertex => return Err(Error::Parse("list properties on vertices".into())),
            ["property", ty, name] if in_vertex => props.push((name.to_string(), PlyType::parse(ty)?)),
            ["property", ..] => {}
            _ => return Err(Error::Parse(format!("unrecognised PLY header line {l:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("missing PLY format".into()))?;
    let count = count.ok_or_else(|| Error::Parse("missing vertex element".into()))?;
    let mut rows = Vec::with_capacity(count);
    match format {
        PlyFormat::BinaryLe => {
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            let mut buf = vec![0u8; stride];
            for _ in 0..count {
                r.read_exact(&mut buf).map_err(|e| Error::Parse(format!("truncated PLY body: {e}")))?;
                let mut off = 0;
                rows.push(
                    props
                        .iter()
                        .map(|(_, t)| {
                            let v = t.read_le(&buf[off..]);
                            off += t.size();
                            v
                        })
                        .collect(),
                );
            }
        }
        PlyFormat::Ascii => {
            let mut text = String::new();
            r.read_to_string(&mut text)?;
            let mut tokens = text.split_whitespace();
            for i in 0..count {
                let mut row = Vec::with_capacity(props.len());
                for _ in 0..props.len() {
                    let t = tokens.next().ok_or_else(|| Error::Parse(format!("vertex {i}: too few values")))?;
                    row.push(t.parse::<f64>().map_err(|e| Error::Parse(format!("vertex {i}: {e}")))?);
                }
                rows.push(row);
            }
        }
    }
    Ok(PlyVertices { names: props.into_iter().map(|p| p.0).collect(), rows })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Density equivalent of a splatting opacity logit.
pub fn opacity_to_density(logit: f64) -> f64 {
    let alpha = sigmoid(logit).min(1.0 - 1e-12);
    -(-alpha).ln_1p() / PLY_REFERENCE_STEP
}

/// Ingests a 3DGS-style PLY: `x y z`, `f_dc_*`, `f_rest_*` (channel-major,
/// truncated to band 2), `opacity` (logit), `scale_*` (log) and `rot_*`
/// (`wxyz`). The splatting colour offset of 0.5 is folded into the DC term.
pub fn read_ply(path: &Path, opts: LoadOptions) -> Result<Scene> {
    let v = parse_ply(std::fs::File::open(path)?)?;
    let col = |n: &str| v.column(n).ok_or_else(|| Error::Parse(format!("PLY lacks property {n}")));
    let pos = [col("x")?, col("y")?, col("z")?];
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let opacity = col("opacity")?;
    let scale = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let rest: Vec<usize> = (0..).map_while(|k| v.column(&format!("f_rest_{k}"))).collect();
    if rest.len() % 3 != 0 {
        return Err(Error::Parse(format!("{} f_rest properties is not a multiple of 3", rest.len())));
    }
    let per_channel = rest.len() / 3;
    let prims = v
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let g = |c: usize| row[c];
            let shape = GaussianShape::new(
                Vec3::new(g(pos[0]), g(pos[1]), g(pos[2])),
                rot.map(g),
                Vec3::new(g(scale[0]).exp(), g(scale[1]).exp(), g(scale[2]).exp()),
                opacity_to_density(g(opacity)),
            )
            .map_err(|e| validation(i, e.to_string()))?;
            let mut app = AppearanceCoeffs::zero();
            app.sh[0] = Rgb::new(g(dc[0]), g(dc[1]), g(dc[2])) + Rgb::repeat(0.5 / SH_C0);
            for k in 1..SH_COEFFS.min(per_channel + 1) {
                app.sh[k] = Rgb::from_fn(|c, _| g(rest[c * per_channel + k - 1]));
            }
            app.validate().map_err(|e| validation(i, e))?;
            Ok(Primitive { id: i as u32, shape, appearance: app })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(prims, DEFAULT_SIGMA_EPS, opts)
}

// ---------------------------------------------------------------------------
// Procedural scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Single,
    Grid,
    RandomCloud,
    Shell,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single-gaussian" => Ok(Self::Single),
            "grid" => Ok(Self::Grid),
            "random-cloud" => Ok(Self::RandomCloud),
            "shell" => Ok(Self::Shell),
            other => Err(Error::InvalidParameter(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: SceneKind,
    pub count: usize,
    pub seed: u64,
    /// Ratio of the longest to the shortest scale.
    pub anisotropy: f64,
}

impl GenSpec {
    pub fn new(kind: SceneKind, count: usize, seed: u64, anisotropy: f64) -> Self {
        Self { kind, count, seed, anisotropy }
    }
}

fn random_appearance<R: Rng>(r: &mut R) -> AppearanceCoeffs {
    let base = Rgb::new(r.gen_range(0.1..1.0), r.gen_range(0.1..1.0), r.gen_range(0.1..1.0));
    let mut app = AppearanceCoeffs::constant(base);
    for k in 1..4 {
        app.sh[k] = Rgb::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1));
    }
    app.sg[0] = SgLobe {
        axis: random_unit(r),
        sharpness: r.gen_range(2.0..10.0),
        amplitude: Rgb::new(r.gen_range(0.0..0.2), r.gen_range(0.0..0.2), r.gen_range(0.0..0.2)),
    };
    app
}

/// Deterministic test scene inside roughly `[-1, 1]³`.
pub fn gen_test_scene(spec: &GenSpec) -> Result<Scene> {
    if !(spec.anisotropy >= 1.0) {
        return Err(Error::InvalidParameter(format!("anisotropy {} must be >= 1", spec.anisotropy)));
    }
    if spec.count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()));
    }
    let mut r = rng(spec.seed);
    let a = spec.anisotropy;
    let mut prims = Vec::new();
    let mut push = |shape: GaussianShape, app: AppearanceCoeffs| {
        let id = prims.len() as u32;
        prims.push(Primitive { id, shape, appearance: app });
    };
    match spec.kind {
        SceneKind::Single => {
            let app = AppearanceCoeffs::constant(Rgb::new(0.9, 0.6, 0.3));
            let s = Vec3::new(1.0, 1.0, a) * (0.25 / a.cbrt());
            push(GaussianShape::new(Vec3::zeros(), [1.0, 0.0, 0.0, 0.0], s, 8.0)?, app);
        }
        SceneKind::Grid => {
            let n = ((spec.count as f64).cbrt().round() as usize).max(1);
            let spacing = 2.0 / n as f64;
            let base = spacing / 5.0;
            for i in 0..n * n * n {
                let idx = [i % n, (i / n) % n, i / (n * n)];
                let m = Vec3::from_fn(|k, _| -1.0 + spacing * (idx[k] as f64 + 0.5));
                let q = if a > 1.0 { random_quat_wxyz(&mut r) } else { [1.0, 0.0, 0.0, 0.0] };
                let s = Vec3::new(1.0, 1.0, a) * (base / a.cbrt());
                push(GaussianShape::new(m, q, s, 4.0 / base)?, random_appearance(&mut r));
            }
        }
        SceneKind::RandomCloud => {
            let base0 = 0.4 / (spec.count as f64).cbrt();
            for _ in 0..spec.count {
                let m = uniform_in_box(&mut r, Vec3::repeat(-1.0), Vec3::repeat(1.0));
                let base = base0 * log_uniform(&mut r, 0.5, 2.0);
                let s = Vec3::new(1.0, 1.0, a) * base;
                let density = log_uniform(&mut r, 0.5, 3.0) / base;
                push(GaussianShape::new(m, random_quat_wxyz(&mut r), s, density)?, random_appearance(&mut r));
            }
        }
        SceneKind::Shell => {
            let base = 1.5 / (spec.count as f64).sqrt();
            for _ in 0..spec.count {
                let normal = random_unit(&mut r);
                // Thin axis along the surface normal.
                let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let t1 = normal.cross(&helper).normalize();
                let t2 = normal.cross(&t1);
                let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[t1, t2, normal]));
                let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
                let s = Vec3::new(a, a, 1.0) * (base / a);
                push(
                    GaussianShape::new(normal * 0.8, [q.w, q.i, q.j, q.k], s, 3.0 / s.min())?,
                    random_appearance(&mut r),
                );
            }
        }
    }
    finish(prims, DEFAULT_SIGMA_EPS, LoadOptions::default())
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub cameras: Vec<Camera>,
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let file: CameraFile = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
    for (i, c) in file.cameras.iter().enumerate() {
        c.validate().map_err(|e| validation(i, e.to_string()))?;
    }
    if file.cameras.is_empty() {
        return Err(validation(0, "camera file lists no cameras"));
    }
    Ok(file.cameras)
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, &CameraFile { cameras: cameras.to_vec() })?;
    Ok(())
}

/// `n` cameras on a horizontal circle of `radius` around the origin, looking
/// at the origin.
pub fn orbit_cameras(n: usize, radius: f64, focal: f64, width: usize, height: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / n as f64;
            let c = Vec3::new(radius * phi.sin(), -0.3 * radius, -radius * phi.cos());
            Camera::look_at(c, Vec3::zeros(), -Vec3::y(), focal, width, height)
        })
        .collect()
}
