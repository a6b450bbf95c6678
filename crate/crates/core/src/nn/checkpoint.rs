//! Binary checkpoint: parameters, step counter and Adam moments.
//!
//! Layout (little-endian): magic `MCCK1`, `u32` entry count, entries, `u64`
//! step, `u32` optimizer entry count, optimizer entries. An entry is
//! `u32` name length, UTF-8 name, `u32` rank, `u32` per dimension, then
//! `f32` values. The model configuration travels as the entry `__config__`
//! holding its UTF-8 text one byte per value.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCCK1";
const CONFIG_ENTRY: &str = "__config__";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub step: u64,
    pub optimizer: Option<AdamState<f32>>,
    pub config: Option<String>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(field, message)| Error::parse(path, field, message))
}

pub(crate) fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let n_cfg = ckpt.config.is_some() as u32;
    out.extend_from_slice(&(ckpt.params.len() as u32 + n_cfg).to_le_bytes());
    if let Some(cfg) = &ckpt.config {
        let vals: Vec<f32> = cfg.bytes().map(f32::from).collect();
        put_entry(&mut out, CONFIG_ENTRY, &[vals.len()], &vals);
    }
    for p in ckpt.params.iter() {
        put_entry(&mut out, p.name(), p.shape(), p.value().data());
    }
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    match &ckpt.optimizer {
        Some(st) => {
            out.extend_from_slice(&(2 * st.m.len() as u32).to_le_bytes());
            for (p, (m, v)) in ckpt.params.iter().zip(st.m.iter().zip(&st.v)) {
                put_entry(&mut out, &format!("{MOMENT1}{}", p.name()), m.shape(), m.data());
                put_entry(&mut out, &format!("{MOMENT2}{}", p.name()), v.shape(), v.data());
            }
        }
        None => out.extend_from_slice(&0u32.to_le_bytes()),
    }
    out
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

type DecodeError = (String, String);

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err((what.to_string(), "unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, DecodeError> {
        let mut b = [0u8; 4];
        self.take(4, what)?.read_exact(&mut b).unwrap();
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, DecodeError> {
        let mut b = [0u8; 8];
        self.take(8, what)?.read_exact(&mut b).unwrap();
        Ok(u64::from_le_bytes(b))
    }

    fn entry(&mut self, idx: usize) -> std::result::Result<(String, Tensor<f32>), DecodeError> {
        let ctx = format!("entry {idx}");
        let len = self.u32(&ctx)? as usize;
        let name = std::str::from_utf8(self.take(len, &ctx)?)
            .map_err(|_| (ctx.clone(), "name is not UTF-8".to_string()))?
            .to_string();
        let rank = self.u32(&name)? as usize;
        if rank > 8 {
            return Err((name, format!("implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u32(&name).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| (name.clone(), e.to_string()))?;
        Ok((name, t))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, DecodeError> {
    if bytes.len() < 5 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(("magic".into(), "not an MCCK1 checkpoint".into()));
    }
    let mut cur = Cursor { buf: &bytes[5..] };
    let count = cur.u32("entry count")? as usize;
    let mut params = ParamStore::new();
    let mut config = None;
    for i in 0..count {
        let (name, t) = cur.entry(i)?;
        if name == CONFIG_ENTRY {
            let text: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
            config = Some(
                String::from_utf8(text)
                    .map_err(|_| (name.clone(), "config is not UTF-8".to_string()))?,
            );
        } else {
            params
                .insert(&name, t)
                .map_err(|e| (name.clone(), e.to_string()))?;
        }
    }
    let step = cur.u64("step")?;
    let n_opt = cur.u32("optimizer entry count")? as usize;
    let optimizer = if n_opt == 0 {
        None
    } else {
        if n_opt != 2 * params.len() {
            return Err((
                "optimizer entry count".into(),
                format!("expected {} entries, found {n_opt}", 2 * params.len()),
            ));
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            for (prefix, dst) in [(MOMENT1, &mut m), (MOMENT2, &mut v)] {
                let (name, t) = cur.entry(count + 2 * i)?;
                let want = format!("{prefix}{}", p.name());
                if name != want || t.shape() != p.shape() {
                    return Err((name, format!("expected {want} with shape {:?}", p.shape())));
                }
                dst.push(t);
            }
        }
        Some(AdamState { step, m, v })
    };
    if !cur.buf.is_empty() {
        return Err(("trailer".into(), format!("{} unexpected bytes", cur.buf.len())));
    }
    Ok(Checkpoint {
        params,
        step,
        optimizer,
        config,
    })
}
