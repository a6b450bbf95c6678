//! On-disk scene bundles: posed RGB-D frames plus the generating scene.
//!
//! Layout of a bundle directory:
//! - `frame_NNNN.ppm`: binary P6, 8-bit RGB.
//! - `frame_NNNN.pfm`: grayscale `Pf`, little-endian f32 rows bottom to top, NaN = unknown.
//! - `frame_NNNN.cam`: `fx fy cx cy`, then the 3×4 world-from-camera matrix row-major.
//! - `scene.txt`: `# seed N`, `# mode M`, then one primitive per line as
//!   `kind cx cy cz p1 p2 p3 r g b` followed by the row-major orientation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{
    bin_color, color_bin_clamped, CameraIntrinsics, Mat3, Pose, RgbdFrame, Vec3,
};
use crate::synthdata::{Primitive, SceneMode, SceneSpec};

pub fn frame_path(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{index:04}.{ext}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(dir: &Path, frames: &[RgbdFrame], scene: &SceneSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        f.validate()?;
        write_file(&frame_path(dir, i, "ppm"), &encode_ppm(f))?;
        write_file(&frame_path(dir, i, "pfm"), &encode_pfm(f))?;
        write_file(&frame_path(dir, i, "cam"), encode_cam(f).as_bytes())?;
    }
    write_file(&dir.join("scene.txt"), encode_scene(scene).as_bytes())
}

/// Reads frames `0..n` where `n` is the first index without an image file.
pub fn read_bundle(dir: &Path) -> Result<(Vec<RgbdFrame>, SceneSpec)> {
    let scene_path = dir.join("scene.txt");
    let text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
    let scene = decode_scene(&scene_path, &text)?;
    let mut frames = Vec::new();
    loop {
        let i = frames.len();
        let ppm = frame_path(dir, i, "ppm");
        if !ppm.exists() {
            break;
        }
        frames.push(read_frame(dir, i)?);
    }
    if frames.is_empty() {
        return Err(Error::parse(dir, "frames", "bundle contains no frame_0000.ppm"));
    }
    Ok((frames, scene))
}

/// Reads a single frame of a bundle.
pub fn read_frame(dir: &Path, index: usize) -> Result<RgbdFrame> {
    let cam = frame_path(dir, index, "cam");
    if !cam.exists() {
        return Err(Error::parse(
            &cam,
            "camera",
            format!("missing camera file for frame {index}"),
        ));
    }
    let cam_text = fs::read_to_string(&cam).map_err(|e| Error::io(&cam, e))?;
    let ppm = frame_path(dir, index, "ppm");
    let (w, h, image) = decode_ppm(&ppm, &read_file(&ppm)?)?;
    let pfm = frame_path(dir, index, "pfm");
    let (dw, dh, depth) = decode_pfm(&pfm, &read_file(&pfm)?)?;
    if (dw, dh) != (w, h) {
        return Err(Error::parse(
            &pfm,
            "size",
            format!("depth is {dw}x{dh} but image is {w}x{h}"),
        ));
    }
    let (intrinsics, pose) = decode_cam(&cam, &cam_text, w, h)?;
    let frame = RgbdFrame {
        image,
        depth,
        intrinsics,
        pose,
    };
    frame.validate()?;
    Ok(frame)
}

/// Number of frames in a bundle directory.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|&i| frame_path(dir, i, "ppm").exists()).count()
}

pub fn encode_ppm(f: &RgbdFrame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", f.width(), f.height()).into_bytes();
    for c in &f.image {
        out.extend(c.iter().map(|&v| color_bin_clamped(v)));
    }
    out
}

/// Splits off `count` whitespace-separated ASCII header tokens, then one whitespace byte.
fn header_tokens<'a>(
    path: &Path,
    bytes: &'a [u8],
    count: usize,
) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, "header", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::parse(path, "header", "no data after header"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_num<T: std::str::FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(path, field, format!("cannot parse {s:?}")))
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::parse(path, "magic", "expected P6"));
    }
    let (t, data) = header_tokens(path, bytes, 4)?;
    let w: usize = parse_num(path, "width", &t[1])?;
    let h: usize = parse_num(path, "height", &t[2])?;
    if t[3] != "255" {
        return Err(Error::parse(path, "maxval", format!("expected 255, got {}", t[3])));
    }
    if data.len() != w * h * 3 {
        return Err(Error::parse(
            path,
            "pixels",
            format!("expected {} bytes, found {}", w * h * 3, data.len()),
        ));
    }
    let image = data
        .chunks_exact(3)
        .map(|c| [bin_color(c[0]), bin_color(c[1]), bin_color(c[2])])
        .collect();
    Ok((w, h, image))
}

pub fn encode_pfm(f: &RgbdFrame) -> Vec<u8> {
    let (w, h) = (f.width(), f.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend((f.depth[v * w + u] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if !bytes.starts_with(b"Pf") || bytes.get(2).is_some_and(|b| !b.is_ascii_whitespace()) {
        return Err(Error::parse(path, "magic", "expected grayscale Pf"));
    }
    let (t, data) = header_tokens(path, bytes, 4)?;
    let w: usize = parse_num(path, "width", &t[1])?;
    let h: usize = parse_num(path, "height", &t[2])?;
    let scale: f64 = parse_num(path, "scale", &t[3])?;
    if scale >= 0.0 {
        return Err(Error::parse(path, "scale", "only little-endian (negative scale) is supported"));
    }
    if data.len() != w * h * 4 {
        return Err(Error::parse(
            path,
            "pixels",
            format!("expected {} bytes, found {}", w * h * 4, data.len()),
        ));
    }
    let mut depth = vec![0.0; w * h];
    for (r, row) in data.chunks_exact(w * 4).enumerate() {
        let v = h - 1 - r;
        for (u, b) in row.chunks_exact(4).enumerate() {
            depth[v * w + u] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    Ok((w, h, depth))
}

pub fn encode_cam(f: &RgbdFrame) -> String {
    let k = &f.intrinsics;
    let mut s = format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy);
    for r in 0..3 {
        let rot = &f.pose.rotation;
        s += &format!(
            "{} {} {} {}\n",
            rot[(r, 0)],
            rot[(r, 1)],
            rot[(r, 2)],
            f.pose.translation[r]
        );
    }
    s
}

fn numbers(path: &Path, field: &str, line: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| parse_num(path, field, t))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(Error::parse(
            path,
            field,
            format!("expected {n} numbers, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

pub fn decode_cam(
    path: &Path,
    text: &str,
    width: usize,
    height: usize,
) -> Result<(CameraIntrinsics, Pose)> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != 4 {
        return Err(Error::parse(
            path,
            "lines",
            format!("expected 4 lines, found {}", lines.len()),
        ));
    }
    let k = numbers(path, "intrinsics", lines[0], 4)?;
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], width, height)
        .map_err(|e| Error::parse(path, "intrinsics", e.to_string()))?;
    let mut rot = Mat3::zeros();
    let mut t = Vec3::zeros();
    for r in 0..3 {
        let row = numbers(path, &format!("pose row {}", r + 1), lines[r + 1], 4)?;
        for c in 0..3 {
            rot[(r, c)] = row[c];
        }
        t[r] = row[3];
    }
    let pose = Pose::new(rot, t).map_err(|e| Error::parse(path, "pose", e.to_string()))?;
    Ok((intrinsics, pose))
}

pub fn encode_scene(scene: &SceneSpec) -> String {
    let mut s = format!("# seed {}\n# mode {}\n", scene.seed, scene.mode);
    for p in &scene.primitives {
        let mut fields = vec![p.kind.as_str().to_string()];
        fields.extend(p.center.iter().map(|v| v.to_string()));
        fields.extend(p.params.iter().map(|v| v.to_string()));
        fields.extend(p.albedo.iter().map(|v| v.to_string()));
        for r in 0..3 {
            for c in 0..3 {
                fields.push(p.orientation[(r, c)].to_string());
            }
        }
        s += &fields.join(" ");
        s.push('\n');
    }
    s
}

pub fn decode_scene(path: &Path, text: &str) -> Result<SceneSpec> {
    let mut seed = None;
    let mut mode = None;
    let mut primitives = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = format!("line {}", ln + 1);
        if let Some(meta) = line.strip_prefix('#') {
            let mut it = meta.split_whitespace();
            match (it.next(), it.next()) {
                (Some("seed"), Some(v)) => seed = Some(parse_num::<u64>(path, &field, v)?),
                (Some("mode"), Some(v)) => {
                    mode = Some(v.parse::<SceneMode>().map_err(|e| {
                        Error::parse(path, &field, e.to_string())
                    })?)
                }
                _ => {}
            }
            continue;
        }
        let (kind, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let kind = kind
            .parse()
            .map_err(|e: Error| Error::parse(path, &field, e.to_string()))?;
        let v = numbers(path, &field, rest, 18)?;
        let orientation = Mat3::from_row_slice(&v[9..18]);
        let prim = Primitive {
            kind,
            center: Vec3::new(v[0], v[1], v[2]),
            params: [v[3], v[4], v[5]],
            albedo: [v[6], v[7], v[8]],
            orientation,
        };
        prim.validate()
            .map_err(|e| Error::parse(path, &field, e.to_string()))?;
        primitives.push(prim);
    }
    let scene = SceneSpec {
        primitives,
        seed: seed.ok_or_else(|| Error::parse(path, "seed", "missing `# seed` line"))?,
        mode: mode.ok_or_else(|| Error::parse(path, "mode", "missing `# mode` line"))?,
    };
    scene
        .validate()
        .map_err(|e| Error::parse(path, "primitives", e.to_string()))?;
    Ok(scene)
}
