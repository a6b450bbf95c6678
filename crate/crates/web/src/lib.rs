//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function has a plain Rust counterpart in [`ops`] that the
//! native tests exercise; the exports only convert errors.

use wasm_bindgen::prelude::*;

pub mod ops {
    use mcc_core::model::build_decoder_mask;
    use mcc_core::synthdata::{
        analytic_distance, generate_scene, object_views, render_views, SceneParams, SceneSpec, ViewSpec,
        OBJECT_CAMERA_DISTANCE,
    };
    use mcc_core::geometry::Vec3;
    use mcc_core::{Error, Result};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Half-width of the world square shown by [`oracle_slice`].
    pub const SLICE_EXTENT: f64 = 2.0;

    pub fn scene(seed: u64) -> Result<SceneSpec> {
        generate_scene(seed, &SceneParams::object())
    }

    /// One line per primitive: kind, center, size parameters and albedo.
    pub fn describe(seed: u64) -> Result<String> {
        let s = scene(seed)?;
        let mut out = String::new();
        for p in &s.primitives {
            out += &format!(
                "{} at ({:.2}, {:.2}, {:.2}) params [{:.2}, {:.2}, {:.2}] albedo [{:.2}, {:.2}, {:.2}]\n",
                p.kind.as_str(),
                p.center.x,
                p.center.y,
                p.center.z,
                p.params[0],
                p.params[1],
                p.params[2],
                p.albedo[0],
                p.albedo[1],
                p.albedo[2]
            );
        }
        Ok(out)
    }

    /// RGBA pixels `2·size` wide: the shaded image on the left, depth on the right
    /// (nearer is brighter, background black).
    pub fn render_view(seed: u64, view: usize, views: usize, size: usize) -> Result<Vec<u8>> {
        if view >= views {
            return Err(Error::InvalidArgument(format!("view {view} out of range ({views} views)")));
        }
        let s = scene(seed)?;
        let all = object_views(views, OBJECT_CAMERA_DISTANCE, size)?;
        let one = ViewSpec {
            poses: vec![all.poses[view]],
            intrinsics: all.intrinsics,
        };
        let frame = render_views(&s, &one, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(seed))?
            .pop()
            .expect("one pose renders one frame");
        let depths: Vec<f64> = frame.depth.iter().copied().filter(|d| d.is_finite() && *d > 0.0).collect();
        let near = depths.iter().copied().fold(f64::INFINITY, f64::min);
        let far = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (far - near).max(1e-9);
        let w = 2 * size;
        let mut px = vec![0u8; w * size * 4];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let rgb = frame.image[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
                let d = frame.depth[i];
                let g = if d.is_finite() && d > 0.0 {
                    (55.0 + 200.0 * (far - d) / span).round() as u8
                } else {
                    0
                };
                let left = (y * w + x) * 4;
                px[left..left + 4].copy_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
                let right = (y * w + size + x) * 4;
                px[right..right + 4].copy_from_slice(&[g, g, g, 255]);
            }
        }
        Ok(px)
    }

    /// RGBA slice through the scene at `offset` along `axis` (0 = x, 1 = y, 2 = z),
    /// covering `[-SLICE_EXTENT, SLICE_EXTENT]²` at `resolution²` pixels.
    ///
    /// Orange marks points within `tau` of a surface, blue the interior, and
    /// gray fades with distance outside.
    pub fn oracle_slice(seed: u64, axis: usize, offset: f64, resolution: usize, tau: f64) -> Result<Vec<u8>> {
        if axis > 2 {
            return Err(Error::InvalidArgument(format!("axis {axis} is not 0, 1 or 2")));
        }
        if resolution == 0 || !(tau > 0.0) {
            return Err(Error::InvalidArgument("resolution and tau must be positive".into()));
        }
        let s = scene(seed)?;
        let (u, v) = [(1, 2), (0, 2), (0, 1)][axis];
        let step = 2.0 * SLICE_EXTENT / resolution as f64;
        let mut px = Vec::with_capacity(resolution * resolution * 4);
        for row in 0..resolution {
            for col in 0..resolution {
                let mut p = Vec3::zeros();
                p[axis] = offset;
                p[u] = -SLICE_EXTENT + (col as f64 + 0.5) * step;
                p[v] = SLICE_EXTENT - (row as f64 + 0.5) * step;
                let d = analytic_distance(&s, &p);
                let inside = s.primitives.iter().any(|q| q.signed_distance(&p) < 0.0);
                let c = if d <= tau {
                    [240, 140, 30]
                } else if inside {
                    [40, 70, 160]
                } else {
                    let g = (230.0 - 60.0 * d.min(3.0)).round() as u8;
                    [g, g, g]
                };
                px.extend_from_slice(&[c[0], c[1], c[2], 255]);
            }
        }
        Ok(px)
    }

    /// The decoder mask as row-major 0/1 bytes over `1 + n_enc + n_q` tokens.
    pub fn decoder_mask(n_enc: usize, n_q: usize) -> Result<Vec<u8>> {
        if n_enc == 0 || n_q == 0 || n_enc + n_q > 256 {
            return Err(Error::InvalidArgument("need 1 ≤ n_enc, n_q and n_enc + n_q ≤ 256".into()));
        }
        Ok(build_decoder_mask(n_enc, n_q).into_iter().map(u8::from).collect())
    }
}

fn js(e: mcc_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn describe_scene(seed: u32) -> Result<String, JsError> {
    ops::describe(seed as u64).map_err(js)
}

#[wasm_bindgen]
pub fn render_view(seed: u32, view: usize, views: usize, size: usize) -> Result<Vec<u8>, JsError> {
    ops::render_view(seed as u64, view, views, size).map_err(js)
}

#[wasm_bindgen]
pub fn oracle_slice(seed: u32, axis: usize, offset: f64, resolution: usize, tau: f64) -> Result<Vec<u8>, JsError> {
    ops::oracle_slice(seed as u64, axis, offset, resolution, tau).map_err(js)
}

#[wasm_bindgen]
pub fn decoder_mask(n_enc: usize, n_q: usize) -> Result<Vec<u8>, JsError> {
    ops::decoder_mask(n_enc, n_q).map_err(js)
}
