//! The MCC network: RGB and XYZ towers fused into R, and a query decoder.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Conditioning, DecoderMode, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{bin_color, Vec3};
use crate::nn::{sigmoid, AttnMask, Graph, Init, ParamStore, Real, Tensor, Var, LN_EPS};

const INIT_STD: f64 = 0.02;

/// One input frame as the network sees it: colors and per-pixel 3D points
/// (already normalized), row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub image: Vec<[f64; 3]>,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl ModelInput {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = config.image_size * config.image_size;
        if self.image.len() != n || self.points.len() != n || self.valid.len() != n {
            return Err(Error::shape(
                "model input",
                &[self.image.len(), self.points.len(), self.valid.len()],
                &[n, n, n],
            ));
        }
        Ok(())
    }
}

/// The fused encoding R (`n_enc × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub r: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput<T> {
    pub occupancy_logits: Vec<T>,
    /// `n_q × 3 × 256`, row-major.
    pub color_logits: Vec<T>,
}

impl<T: Real> DecoderOutput<T> {
    pub fn len(&self) -> usize {
        self.occupancy_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy_logits.is_empty()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        sigmoid(self.occupancy_logits[i]).f64()
    }

    /// Per-channel argmax bins of query `i`.
    pub fn color_bins(&self, i: usize) -> [u8; 3] {
        let mut out = [0u8; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let row = &self.color_logits[(i * 3 + ch) * 256..][..256];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            *o = best as u8;
        }
        out
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.color_bins(i).map(bin_color)
    }
}

/// The decoder attention pattern over `[cls, n_enc encoder tokens, n_q queries]`.
///
/// Every token may attend to the global token and the encoder tokens; a query
/// may additionally attend to itself and to no other query.
pub fn build_decoder_mask(n_enc: usize, n_q: usize) -> Vec<bool> {
    let n = 1 + n_enc + n_q;
    let mut m = vec![false; n * n];
    for i in 0..n {
        m[i * n..i * n + 1 + n_enc].fill(true);
        if i > n_enc {
            m[i * n + i] = true;
        }
    }
    m
}

fn decoder_attn_mask(n_enc: usize, n_q: usize) -> Result<AttnMask> {
    let base: Vec<u32> = (0..(1 + n_enc) as u32).collect();
    let rows = (0..1 + n_enc + n_q)
        .map(|i| {
            let mut r = base.clone();
            if i > n_enc {
                r.push(i as u32);
            }
            r
        })
        .collect();
    AttnMask::from_rows(rows, 1 + n_enc + n_q)
}

type Spec = (String, Vec<usize>, Init);

fn linear_spec(out: &mut Vec<Spec>, name: &str, din: usize, dout: usize) {
    out.push((format!("{name}.w"), vec![din, dout], Init::TruncNormal(INIT_STD)));
    out.push((format!("{name}.b"), vec![dout], Init::Zeros));
}

fn norm_spec(out: &mut Vec<Spec>, name: &str, dim: usize) {
    out.push((format!("{name}.g"), vec![dim], Init::Ones));
    out.push((format!("{name}.b"), vec![dim], Init::Zeros));
}

fn block_spec(out: &mut Vec<Spec>, name: &str, dim: usize, hidden: usize, cross: bool) {
    norm_spec(out, &format!("{name}.ln1"), dim);
    if cross {
        norm_spec(out, &format!("{name}.lnm"), dim);
    }
    for p in ["q", "k", "v", "o"] {
        linear_spec(out, &format!("{name}.{p}"), dim, dim);
    }
    norm_spec(out, &format!("{name}.ln2"), dim);
    linear_spec(out, &format!("{name}.fc1"), dim, hidden);
    linear_spec(out, &format!("{name}.fc2"), hidden, dim);
}

fn param_specs(c: &ModelConfig) -> Vec<Spec> {
    let (d, p2) = (c.enc_dim, c.patch_size * c.patch_size);
    let tok = |name: &str, shape: Vec<usize>| (name.to_string(), shape, Init::TruncNormal(INIT_STD));
    let mut s = Vec::new();
    if c.use_rgb {
        linear_spec(&mut s, "rgb.patch", 3 * p2, d);
        s.push(tok("rgb.cls", vec![d]));
        s.push(tok("rgb.pos", vec![c.n_enc(), d]));
        for i in 0..c.enc_layers {
            block_spec(&mut s, &format!("rgb.blocks.{i}"), d, d * c.mlp_ratio, false);
        }
        norm_spec(&mut s, "rgb.norm", d);
    }
    linear_spec(&mut s, "xyz.pixel", 3, d);
    s.push(tok("xyz.unknown", vec![d]));
    s.push(tok("xyz.readout", vec![d]));
    block_spec(&mut s, "xyz.patch_block", d, d * c.xyz_mlp_ratio, false);
    s.push(tok("xyz.cls", vec![d]));
    s.push(tok("xyz.pos", vec![c.n_enc(), d]));
    for i in 0..c.enc_layers {
        block_spec(&mut s, &format!("xyz.blocks.{i}"), d, d * c.mlp_ratio, false);
    }
    norm_spec(&mut s, "xyz.norm", d);
    linear_spec(&mut s, "fuse", if c.use_rgb { 2 * d } else { d }, d);

    let dd = c.dec_dim;
    linear_spec(&mut s, "dec.query", 3, d);
    linear_spec(&mut s, "dec.embed", d, dd);
    let cross = c.decoder_mode == DecoderMode::CrossAttn;
    if !cross {
        s.push(tok("dec.cls", vec![1, dd]));
    }
    for i in 0..c.dec_layers {
        block_spec(&mut s, &format!("dec.blocks.{i}"), dd, dd * c.mlp_ratio, cross);
    }
    norm_spec(&mut s, "dec.norm", dd);
    linear_spec(&mut s, "head.occ", dd, 1);
    linear_spec(&mut s, "head.color", dd, 3 * c.color_bins);
    s
}

/// Graph-building context that loads each parameter at most once.
pub struct Builder<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    cache: HashMap<String, Var>,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            g,
            store,
            cache: HashMap::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(*v);
        }
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        let v = self.g.param(self.store, id);
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gain = self.p(&format!("{name}.g"))?;
        let bias = self.p(&format!("{name}.b"))?;
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn mlp(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{name}.ln2"))?;
        let h = self.linear(h, &format!("{name}.fc1"))?;
        let h = self.g.gelu(h)?;
        let h = self.linear(h, &format!("{name}.fc2"))?;
        self.g.add(x, h)
    }

    /// Pre-norm transformer block over `[n, d]` or `[B, n, d]`.
    fn block(&mut self, x: Var, name: &str, heads: usize, mask: Option<Rc<AttnMask>>) -> Result<Var> {
        let h = self.norm(x, &format!("{name}.ln1"))?;
        let q = self.linear(h, &format!("{name}.q"))?;
        let k = self.linear(h, &format!("{name}.k"))?;
        let v = self.linear(h, &format!("{name}.v"))?;
        let a = self.g.attention(q, k, v, mask, heads)?;
        let a = self.linear(a, &format!("{name}.o"))?;
        let x = self.g.add(x, a)?;
        self.mlp(x, name)
    }

    /// Block whose tokens attend only to a fixed memory.
    fn cross_block(&mut self, x: Var, mem: Var, name: &str, heads: usize) -> Result<Var> {
        let h = self.norm(x, &format!("{name}.ln1"))?;
        let m = self.norm(mem, &format!("{name}.lnm"))?;
        let q = self.linear(h, &format!("{name}.q"))?;
        let k = self.linear(m, &format!("{name}.k"))?;
        let v = self.linear(m, &format!("{name}.v"))?;
        let a = self.g.attention(q, k, v, None, heads)?;
        let a = self.linear(a, &format!("{name}.o"))?;
        let x = self.g.add(x, a)?;
        self.mlp(x, name)
    }

    /// `[n, C]` patch tokens → global token, positions, blocks, final norm.
    fn tower(&mut self, tokens: Var, c: &ModelConfig, prefix: &str) -> Result<Var> {
        let d = c.enc_dim;
        let n = c.n_patches();
        let x = self.g.reshape(tokens, &[1, n, d])?;
        let cls = self.p(&format!("{prefix}.cls"))?;
        let x = self.g.prepend_token(x, cls)?;
        let x = self.g.reshape(x, &[n + 1, d])?;
        let pos = self.p(&format!("{prefix}.pos"))?;
        let mut x = self.g.add(x, pos)?;
        for i in 0..c.enc_layers {
            x = self.block(x, &format!("{prefix}.blocks.{i}"), c.enc_heads, None)?;
        }
        self.norm(x, &format!("{prefix}.norm"))
    }

    pub fn patch_embed_rgb(&mut self, c: &ModelConfig, image: &[[f64; 3]]) -> Result<Var> {
        let (s, p) = (c.image_size, c.patch_size);
        if image.len() != s * s {
            return Err(Error::shape("patch_embed_rgb", &[image.len()], &[s * s]));
        }
        let side = c.patches_per_side();
        let mut data = Vec::with_capacity(s * s * 3);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..p {
                    for dx in 0..p {
                        let px_color = image[(py * p + dy) * s + px * p + dx];
                        data.extend(px_color.iter().map(|&v| T::c(v)));
                    }
                }
            }
        }
        let x = self.g.input(Tensor::new(&[side * side, 3 * p * p], data)?);
        self.linear(x, "rgb.patch")
    }

    pub fn patch_embed_xyz(&mut self, c: &ModelConfig, points: &[Vec3], valid: &[bool]) -> Result<Var> {
        let (s, p, d) = (c.image_size, c.patch_size, c.enc_dim);
        if points.len() != s * s || valid.len() != s * s {
            return Err(Error::shape(
                "patch_embed_xyz",
                &[points.len(), valid.len()],
                &[s * s, s * s],
            ));
        }
        let side = c.patches_per_side();
        let np = side * side;
        let p2 = p * p;
        let mut coords = Vec::with_capacity(np * p2 * 3);
        let mut ok = Vec::with_capacity(np * p2);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..p {
                    for dx in 0..p {
                        let i = (py * p + dy) * s + px * p + dx;
                        if valid[i] {
                            coords.extend(points[i].iter().map(|&v| T::c(v)));
                        } else {
                            coords.extend([T::zero(); 3]);
                        }
                        ok.push(valid[i]);
                    }
                }
            }
        }
        let x = self.g.input(Tensor::new(&[np * p2, 3], coords)?);
        let x = self.linear(x, "xyz.pixel")?;
        let unknown = self.p("xyz.unknown")?;
        let x = self.g.select_rows(x, unknown, &ok)?;
        let x = self.g.reshape(x, &[np, p2, d])?;
        let readout = self.p("xyz.readout")?;
        let x = self.g.prepend_token(x, readout)?;
        let x = self.block(x, "xyz.patch_block", c.enc_heads, None)?;
        let x = self.g.reshape(x, &[np * (p2 + 1), d])?;
        let idx: Vec<usize> = (0..np).map(|k| k * (p2 + 1)).collect();
        self.g.gather_rows(x, &idx)
    }

    /// R for one frame, `[n_enc, C]`.
    pub fn encode(&mut self, c: &ModelConfig, input: &ModelInput) -> Result<Var> {
        input.validate(c)?;
        let xyz = self.patch_embed_xyz(c, &input.points, &input.valid)?;
        let xyz = self.tower(xyz, c, "xyz")?;
        let fused = if c.use_rgb {
            let rgb = self.patch_embed_rgb(c, &input.image)?;
            let rgb = self.tower(rgb, c, "rgb")?;
            self.g.concat_last(rgb, xyz)?
        } else {
            xyz
        };
        self.linear(fused, "fuse")
    }

    /// Occupancy logits `[n_q]` and color logits `[3·n_q, 256]`.
    pub fn decode(&mut self, c: &ModelConfig, r: Var, queries: &[Vec3]) -> Result<(Var, Var)> {
        if queries.is_empty() {
            return Err(Error::invalid("decode needs at least one query"));
        }
        let nq = queries.len();
        let qdata: Vec<T> = queries.iter().flat_map(|q| q.iter().map(|&v| T::c(v))).collect();
        let q = self.g.input(Tensor::new(&[nq, 3], qdata)?);
        let q = self.linear(q, "dec.query")?;
        let mem = match c.conditioning {
            Conditioning::Detailed => r,
            Conditioning::Global => self.g.mean_rows(r)?,
        };
        let n_mem = self.g.value(mem).rows();
        let x = match c.decoder_mode {
            DecoderMode::ConcatAttn => {
                let seq = self.g.concat_rows(&[mem, q])?;
                let seq = self.linear(seq, "dec.embed")?;
                let cls = self.p("dec.cls")?;
                let mut x = self.g.concat_rows(&[cls, seq])?;
                let mask = Rc::new(decoder_attn_mask(n_mem, nq)?);
                for i in 0..c.dec_layers {
                    x = self.block(x, &format!("dec.blocks.{i}"), c.dec_heads, Some(mask.clone()))?;
                }
                let idx: Vec<usize> = (1 + n_mem..1 + n_mem + nq).collect();
                self.g.gather_rows(x, &idx)?
            }
            DecoderMode::CrossAttn => {
                let m = self.linear(mem, "dec.embed")?;
                let mut x = self.linear(q, "dec.embed")?;
                for i in 0..c.dec_layers {
                    x = self.cross_block(x, m, &format!("dec.blocks.{i}"), c.dec_heads)?;
                }
                x
            }
        };
        let x = self.norm(x, "dec.norm")?;
        let occ = self.linear(x, "head.occ")?;
        let occ = self.g.reshape(occ, &[nq])?;
        let col = self.linear(x, "head.color")?;
        let col = self.g.reshape(col, &[nq * 3, c.color_bins])?;
        Ok((occ, col))
    }
}

/// Network parameters plus an instrumented count of encoder invocations.
#[derive(Debug)]
pub struct Mcc<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encode_calls: AtomicU64,
}

impl<T: Real> Clone for Mcc<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encode_calls: AtomicU64::new(self.encode_calls()),
        }
    }
}

impl<T: Real> Mcc<T> {
    /// Freshly initialized network; identical values for every `T` given the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        for (name, shape, init) in param_specs(&config) {
            store.add(&name, &shape, init, &mut rng)?;
        }
        Ok(Self::from_params(config, store.cast())?)
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(params.iter()) {
            if p.name() != name || p.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name(),
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            encode_calls: AtomicU64::new(0),
        })
    }

    pub fn cast<U: Real>(&self) -> Mcc<U> {
        Mcc {
            config: self.config.clone(),
            params: self.params.cast(),
            encode_calls: AtomicU64::new(0),
        }
    }

    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, input: &ModelInput) -> Result<EncoderOutput<T>> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let mut b = Builder::new(&mut g, &self.params);
        let r = b.encode(&self.config, input)?;
        Ok(EncoderOutput {
            r: g.value(r).clone(),
        })
    }

    pub fn decode(&self, enc: &EncoderOutput<T>, queries: &[Vec3]) -> Result<DecoderOutput<T>> {
        let mut g = Graph::new();
        let r = g.input(enc.r.clone());
        let mut b = Builder::new(&mut g, &self.params);
        let (occ, col) = b.decode(&self.config, r, queries)?;
        Ok(DecoderOutput {
            occupancy_logits: g.value(occ).data().to_vec(),
            color_logits: g.value(col).data().to_vec(),
        })
    }

    /// Occupancy probability and color per query, encoding the frame once.
    pub fn predict(&self, input: &ModelInput, queries: &[Vec3]) -> Result<Vec<(f64, [f64; 3])>> {
        let enc = self.encode(input)?;
        let out = self.decode(&enc, queries)?;
        Ok((0..out.len()).map(|i| (out.sigma(i), out.color(i))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_table_example() {
        let m = build_decoder_mask(2, 2);
        let row = |i: usize| m[i * 5..(i + 1) * 5].to_vec();
        assert_eq!(row(3), vec![true, true, true, true, false]);
        assert_eq!(row(4), vec![true, true, true, false, true]);
        assert_eq!(row(0), vec![true, true, true, false, false]);
        let full = build_decoder_mask(3, 1);
        let sparse = decoder_attn_mask(3, 1).unwrap().to_dense();
        assert_eq!(full, sparse);
    }

    #[test]
    fn param_names_are_unique() {
        for c in [ModelConfig::desk(), ModelConfig::paper()] {
            let specs = param_specs(&c);
            let mut names: Vec<_> = specs.iter().map(|s| s.0.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), specs.len());
        }
    }
}
