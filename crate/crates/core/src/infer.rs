//! Grid reconstruction from one frame, and ASCII PLY point-cloud files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{bin_color, color_bin_clamped, make_grid, NormalizationTransform, PointCloud, Vec3};
use crate::model::{DecoderOutput, EncoderOutput, Mcc, ModelInput};
use crate::nn::Real;
use crate::synthdata::SceneMode;

pub const DEFAULT_CHUNK_SIZE: usize = 2048;

/// Worker count: `MCC_THREADS` if set and positive, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("MCC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Inference lattice for a mode: the object cube, or the scene box in front of the camera.
pub fn query_grid(mode: SceneMode, model: &crate::config::ModelConfig, granularity: f64) -> Result<Vec<Vec3>> {
    match mode {
        SceneMode::Object => {
            let r = model.object_range;
            make_grid(Vec3::repeat(-r), Vec3::repeat(r), granularity)
        }
        SceneMode::Scene => {
            let r = model.scene_range;
            make_grid(
                Vec3::new(-r, -r, granularity),
                Vec3::new(r, r, r),
                granularity,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructOptions {
    pub granularity: f64,
    pub threshold: f64,
    pub mode: SceneMode,
    pub chunk_size: usize,
    pub threads: usize,
}

impl ReconstructOptions {
    pub fn new(granularity: f64, threshold: f64, mode: SceneMode) -> Self {
        Self {
            granularity,
            threshold,
            mode,
            chunk_size: DEFAULT_CHUNK_SIZE,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Kept points in model coordinates, colored.
    pub cloud: PointCloud,
    /// Occupancy probability of every grid point, in grid order.
    pub sigma: Vec<f64>,
    /// Maps reference coordinates to model coordinates.
    pub norm: NormalizationTransform,
}

impl Reconstruction {
    /// The kept points mapped back to reference coordinates.
    pub fn denormalized(&self) -> PointCloud {
        self.cloud.transformed(|p| self.norm.invert(p))
    }
}

/// Decodes `queries` against one encoding in fixed-size chunks, possibly on several threads.
pub fn decode_chunked<T: Real>(
    model: &Mcc<T>,
    enc: &EncoderOutput<T>,
    queries: &[Vec3],
    chunk_size: usize,
    threads: usize,
) -> Result<DecoderOutput<T>> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be positive"));
    }
    let chunks: Vec<&[Vec3]> = queries.chunks(chunk_size).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    let mut parts: Vec<Option<Result<DecoderOutput<T>>>> = (0..chunks.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, c) in parts.iter_mut().zip(&chunks) {
            *slot = Some(model.decode(enc, c));
        }
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            for (slots, cs) in parts.chunks_mut(per).zip(chunks.chunks(per)) {
                s.spawn(move || {
                    for (slot, c) in slots.iter_mut().zip(cs) {
                        *slot = Some(model.decode(enc, c));
                    }
                });
            }
        });
    }
    let mut out = DecoderOutput {
        occupancy_logits: Vec::with_capacity(queries.len()),
        color_logits: Vec::with_capacity(queries.len() * 768),
    };
    for p in parts {
        let p = p.expect("every chunk decoded")?;
        out.occupancy_logits.extend(p.occupancy_logits);
        out.color_logits.extend(p.color_logits);
    }
    Ok(out)
}

/// Encodes the frame once, evaluates the mode's grid and keeps points with σ above the threshold.
pub fn reconstruct<T: Real>(
    model: &Mcc<T>,
    input: &ModelInput,
    norm: NormalizationTransform,
    opts: &ReconstructOptions,
) -> Result<Reconstruction> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {}",
            opts.threshold
        )));
    }
    let grid = query_grid(opts.mode, &model.config, opts.granularity)?;
    let enc = model.encode(input)?;
    let out = decode_chunked(model, &enc, &grid, opts.chunk_size, opts.threads)?;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut sigma = Vec::with_capacity(grid.len());
    for (i, q) in grid.iter().enumerate() {
        let s = out.sigma(i);
        sigma.push(s);
        if s > opts.threshold {
            positions.push(*q);
            colors.push(out.color(i));
        }
    }
    Ok(Reconstruction {
        cloud: PointCloud {
            positions,
            colors: Some(colors),
        },
        sigma,
        norm,
    })
}

const PLY_HEADER: [&str; 3] = ["ply", "format ascii 1.0", "element vertex"];
const PLY_PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s += "ply\nformat ascii 1.0\n";
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for p in PLY_PROPERTIES {
        s += p;
        s.push('\n');
    }
    s += "end_header\n";
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = cloud.colors.as_ref().map_or([0.0; 3], |c| c[i]);
        let c = c.map(color_bin_clamped);
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
    }
    s
}

pub fn export_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn import_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

/// Parses the exact header written by [`export_ply`]; `origin` only labels errors.
pub fn parse_ply(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(origin, what, "unexpected end of file"))
    };
    let (_, l) = next("magic")?;
    if l.trim_end() != PLY_HEADER[0] {
        return Err(Error::parse(origin, "line 1", "missing `ply` magic"));
    }
    let (_, l) = next("format")?;
    if l.trim_end() != PLY_HEADER[1] {
        return Err(Error::parse(origin, "line 2", format!("unsupported format {l:?}")));
    }
    let (_, l) = next("element")?;
    let n: usize = l
        .trim_end()
        .strip_prefix("element vertex ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(origin, "line 3", format!("expected `element vertex N`, got {l:?}")))?;
    for (k, p) in PLY_PROPERTIES.iter().enumerate() {
        let (_, l) = next("property")?;
        if l.trim_end() != *p {
            return Err(Error::parse(origin, format!("line {}", k + 4), format!("expected {p:?}, got {l:?}")));
        }
    }
    let (_, l) = next("end_header")?;
    if l.trim_end() != "end_header" {
        return Err(Error::parse(origin, "line 10", "expected end_header"));
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = next("vertex")?;
        let field = format!("line {}", ln + 1);
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 6 {
            return Err(Error::parse(origin, field, format!("expected 6 values, found {}", t.len())));
        }
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = t[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(origin, &field, format!("bad coordinate {:?}", t[k])))?;
        }
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            let b: u8 = t[3 + k]
                .parse()
                .map_err(|_| Error::parse(origin, &field, format!("bad color {:?}", t[3 + k])))?;
            rgb[k] = bin_color(b);
        }
        positions.push(Vec3::from(xyz));
        colors.push(rgb);
    }
    if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(
            origin,
            format!("line {}", ln + 1),
            format!("trailing data {l:?} after {n} vertices"),
        ));
    }
    Ok(PointCloud {
        positions,
        colors: Some(colors),
    })
}
