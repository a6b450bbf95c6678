//! Tape of tensor operations with reverse-mode gradients.
//!
//! Every operation evaluates eagerly and records how to push gradients back
//! to its inputs. Views are row-major: "rows" means every axis but the last.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed key columns per query row of an attention operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    m: usize,
    allowed: Vec<Vec<u32>>,
}

impl AttnMask {
    pub fn full(n: usize, m: usize) -> Self {
        let row: Vec<u32> = (0..m as u32).collect();
        Self {
            n,
            m,
            allowed: vec![row; n],
        }
    }

    /// Builds from a dense row-major `n×m` boolean table (`true` = may attend).
    pub fn from_dense(dense: &[bool], n: usize, m: usize) -> Result<Self> {
        if dense.len() != n * m {
            return Err(Error::shape("AttnMask::from_dense", &[dense.len()], &[n, m]));
        }
        let mut allowed = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<u32> = (0..m)
                .filter(|&j| dense[i * m + j])
                .map(|j| j as u32)
                .collect();
            if row.is_empty() {
                return Err(Error::invalid(format!(
                    "attention mask row {i} allows no keys"
                )));
            }
            allowed.push(row);
        }
        Ok(Self { n, m, allowed })
    }

    pub fn from_rows(allowed: Vec<Vec<u32>>, m: usize) -> Result<Self> {
        for (i, r) in allowed.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::invalid(format!(
                    "attention mask row {i} allows no keys"
                )));
            }
            if r.iter().any(|&j| j as usize >= m) || r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("attention mask row {i} is malformed")));
            }
        }
        Ok(Self {
            n: allowed.len(),
            m,
            allowed,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn allowed(&self, row: usize) -> &[u32] {
        &self.allowed[row]
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut d = vec![false; self.n * self.m];
        for (i, r) in self.allowed.iter().enumerate() {
            for &j in r {
                d[i * self.m + j as usize] = true;
            }
        }
        d
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
        probs: Vec<T>,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    PrependToken {
        x: Var,
        tok: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows {
        x: Var,
    },
    SelectRows {
        x: Var,
        fill: Var,
        valid: Vec<bool>,
    },
    Reshape {
        x: Var,
    },
    Bce {
        x: Var,
        targets: Vec<T>,
    },
    CrossEntropy {
        x: Var,
        classes: Vec<usize>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    DotConst {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients summed over every use; zeros for unused parameters.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Graph that fails any operation producing a NaN or infinity.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (dout, 1),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(dout) {
                for (o, &v) in r.iter_mut().zip(bv) {
                    *o += v;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, "linear")
    }

    /// Elementwise sum; `b` may be broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return Err(Error::shape("add", as_, bs));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            for (o, v) in chunk.iter_mut().zip(bv) {
                *o += *v;
            }
        }
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        self.push(out, Op::Scale { x, k }, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu { x }, "gelu")
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut out = xv.clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_c = T::c(1.0 / c as f64);
        let eps = T::c(eps);
        for row in out.data_mut().chunks_mut(c) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { x }, "softmax")
    }

    /// Multi-head scaled dot-product attention restricted to `mask`.
    ///
    /// `q` is `[n, d]` or `[B, n, d]`; `k` and `v` are `[m, d]` or `[B, m, d]`.
    /// Keys outside a row's allowed set get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Rc<AttnMask>>,
        heads: usize,
    ) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() < 2 || qs.len() > 3 || ks.len() != qs.len() || ks != vs {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let r = qs.len();
        let (n, d, m) = (qs[r - 2], qs[r - 1], ks[r - 2]);
        let batch = if r == 3 { qs[0] } else { 1 };
        if ks[r - 1] != d || (r == 3 && ks[0] != batch) {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let mask = match mask {
            Some(mk) => {
                if mk.dims() != (n, m) {
                    let (mn, mm) = mk.dims();
                    return Err(Error::shape("attention mask", &[mn, mm], &[n, m]));
                }
                mk
            }
            None => Rc::new(AttnMask::full(n, m)),
        };
        let dh = d / heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let offsets = row_offsets(&mask);
        let nnz = offsets[n];
        let mut probs = vec![T::zero(); batch * heads * nnz];
        let mut out = vec![T::zero(); batch * n * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * nnz;
                for i in 0..n {
                    let qrow = &qd[(b * n + i) * d + h * dh..][..dh];
                    let cols = mask.allowed(i);
                    let p = &mut probs[pbase + offsets[i]..pbase + offsets[i + 1]];
                    for (pj, &j) in p.iter_mut().zip(cols) {
                        let krow = &kd[(b * m + j as usize) * d + h * dh..][..dh];
                        *pj = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (&pj, &j) in p.iter().zip(cols) {
                        let vrow = &vd[(b * m + j as usize) * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&qs, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            "attention",
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != bs.len() || as_[..as_.len() - 1] != bs[..bs.len() - 1] {
            return Err(Error::shape("concat_last", &as_, &bs));
        }
        let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
        let rows = self.value(a).rows();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = as_;
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(&shape, out)?, Op::ConcatLast { a, b }, "concat_last")
    }

    /// Stacks 2-D `[n_i, C]` operands along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::invalid("concat_rows of nothing")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(Error::shape("concat_rows", s, &[s[0], c]));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(&[rows, c], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// `[B, n, C]` → `[B, n+1, C]` with `tok` (`[C]`) as the first row of every batch.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if xs.len() != 3 || self.value(tok).numel() != c {
            return Err(Error::shape("prepend_token", &xs, self.shape(tok)));
        }
        let (b, n) = (xs[0], xs[1]);
        let (xd, td) = (self.value(x).data(), self.value(tok).data());
        let mut out = Vec::with_capacity(b * (n + 1) * c);
        for bi in 0..b {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[bi * n * c..(bi + 1) * n * c]);
        }
        self.push(
            Tensor::new(&[b, n + 1, c], out)?,
            Op::PrependToken { x, tok },
            "prepend_token",
        )
    }

    /// Rows of `x` (viewed as `[R, C]`) at `idx`, as `[idx.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &[bad], &[rows]));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(&[idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Mean over rows: `[R, C]` → `[1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); c];
        for r in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += *v;
            }
        }
        let inv = T::c(1.0 / rows as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&[1, c], out)?, Op::MeanRows { x }, "mean_rows")
    }

    /// Row `r` of the output is `x[r]` where `valid[r]`, else `fill`.
    pub fn select_rows(&mut self, x: Var, fill: Var, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if valid.len() != rows || self.value(fill).numel() != c {
            return Err(Error::shape("select_rows", xv.shape(), &[valid.len(), c]));
        }
        let fd = self.value(fill).data().to_vec();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            if !valid[r] {
                row.copy_from_slice(&fd);
            }
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                fill,
                valid: valid.to_vec(),
            },
            "select_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    /// Mean binary cross-entropy of logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce_with_logits", xv.shape(), &[targets.len()]));
        }
        let t: Vec<T> = targets
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        let mut sum = T::zero();
        for (&l, &y) in xv.data().iter().zip(&t) {
            sum += l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p();
        }
        let loss = sum / T::c(t.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::Bce { x, targets: t },
            "bce_with_logits",
        )
    }

    /// Mean softmax cross-entropy of `[R, k]` logits against class indices.
    pub fn cross_entropy(&mut self, x: Var, classes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, k) = (xv.rows(), xv.cols());
        if rows != classes.len() || rows == 0 {
            return Err(Error::shape("cross_entropy", xv.shape(), &[classes.len()]));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!(
                "class {bad} out of range for {k}-way logits"
            )));
        }
        let mut sum = T::zero();
        for (row, &c) in xv.data().chunks(k).zip(classes) {
            sum += log_sum_exp(row) - row[c];
        }
        let loss = sum / T::c(rows as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x,
                classes: classes.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// `Σ w_i · s_i` over scalar operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", self.shape(v), &[1]));
            }
            s += self.value(v).item() * w;
        }
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            "weighted_sum",
        )
    }

    /// `Σ x ⊙ w` for a constant `w` of the same size.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != w.len() {
            return Err(Error::shape("dot_const", xv.shape(), &[w.len()]));
        }
        let s = dot(xv.data(), w);
        self.push(
            Tensor::scalar(s),
            Op::DotConst { x, w: w.to_vec() },
            "dot_const",
        )
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        if self.check_finite {
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    if !g.all_finite() {
                        return Err(Error::NonFinite(format!("gradient of node {i}")));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, g, (dout, 1), wv.data(), (1, dout), &mut dx, false);
                accumulate(grads, *x, xv.shape(), dx);
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(din, rows, dout, xv.data(), (1, din), g, (dout, 1), &mut dw, false);
                accumulate(grads, *w, wv.shape(), dw);
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for r in g.chunks(dout) {
                        for (o, v) in db.iter_mut().zip(r) {
                            *o += *v;
                        }
                    }
                    accumulate(grads, *b, &[dout], db);
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, gy.shape(), g.to_vec());
                let bs = self.shape(*b);
                let nb = self.value(*b).numel();
                let mut db = vec![T::zero(); nb];
                for chunk in g.chunks(nb) {
                    for (o, v) in db.iter_mut().zip(chunk) {
                        *o += *v;
                    }
                }
                accumulate(grads, *b, bs, db);
            }
            Op::Scale { x, k } => {
                accumulate(grads, *x, gy.shape(), g.iter().map(|&v| v * *k).collect());
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                let dx = g.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                accumulate(grads, *x, gy.shape(), dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gd = self.value(*gain).data();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let inv_c = T::c(1.0 / c as f64);
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, (xr, gr)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gd[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    s1 *= inv_c;
                    s2 *= inv_c;
                    let out = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        out[j] = rs * (dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *gain, &[c], dg);
                accumulate(grads, *bias, &[c], db);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, gy.shape(), dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let qs = qv.shape();
                let r = qs.len();
                let (n, d) = (qs[r - 2], qs[r - 1]);
                let m = kv.shape()[r - 2];
                let batch = if r == 3 { qs[0] } else { 1 };
                let heads = *heads;
                let dh = d / heads;
                let scale = T::c(1.0 / (dh as f64).sqrt());
                let offsets = row_offsets(mask);
                let nnz = offsets[n];
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = Vec::new();
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * nnz;
                        for i in 0..n {
                            let cols = mask.allowed(i);
                            let p = &probs[pbase + offsets[i]..pbase + offsets[i + 1]];
                            let go = &g[(b * n + i) * d + h * dh..][..dh];
                            dp.clear();
                            for (&pj, &j) in p.iter().zip(cols) {
                                let j = j as usize;
                                let vrow = &vd[(b * m + j) * d + h * dh..][..dh];
                                dp.push(dot(go, vrow));
                                let dvrow = &mut dv[(b * m + j) * d + h * dh..][..dh];
                                for (o, &gv) in dvrow.iter_mut().zip(go) {
                                    *o += pj * gv;
                                }
                            }
                            let s = dot(p, &dp);
                            let qrow = &qd[(b * n + i) * d + h * dh..][..dh];
                            for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(cols) {
                                let j = j as usize;
                                let ds = pj * (dpj - s) * scale;
                                let krow = &kd[(b * m + j) * d + h * dh..][..dh];
                                let dqrow = &mut dq[(b * n + i) * d + h * dh..][..dh];
                                for (o, &kk) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * kk;
                                }
                                let dkrow = &mut dk[(b * m + j) * d + h * dh..][..dh];
                                for (o, &qq) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds * qq;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, qs, dq);
                accumulate(grads, *k, kv.shape(), dk);
                accumulate(grads, *v, vv.shape(), dv);
            }
            Op::ConcatLast { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut da = Vec::with_capacity(self.value(*a).numel());
                let mut db = Vec::with_capacity(self.value(*b).numel());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, self.shape(*a), da);
                accumulate(grads, *b, self.shape(*b), db);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    accumulate(grads, p, self.shape(p), g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::PrependToken { x, tok } => {
                let xs = self.shape(*x);
                let (b, n, c) = (xs[0], xs[1], xs[2]);
                let mut dx = Vec::with_capacity(b * n * c);
                let mut dt = vec![T::zero(); c];
                for bi in 0..b {
                    let blk = &g[bi * (n + 1) * c..(bi + 1) * (n + 1) * c];
                    for (o, v) in dt.iter_mut().zip(&blk[..c]) {
                        *o += *v;
                    }
                    dx.extend_from_slice(&blk[c..]);
                }
                accumulate(grads, *x, xs, dx);
                accumulate(grads, *tok, self.shape(*tok), dt);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += *v;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::MeanRows { x } => {
                let xv = self.value(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                let inv = T::c(1.0 / rows as f64);
                let mut dx = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SelectRows { x, fill, valid } => {
                let c = node.value.cols();
                let mut dx = g.to_vec();
                let mut df = vec![T::zero(); c];
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    if !valid[r] {
                        for (o, v) in df.iter_mut().zip(row.iter_mut()) {
                            *o += *v;
                            *v = T::zero();
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
                accumulate(grads, *fill, self.shape(*fill), df);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.shape(*x), g.to_vec());
            }
            Op::Bce { x, targets } => {
                let xv = self.value(*x);
                let s = g[0] / T::c(targets.len() as f64);
                let dx = xv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| (sigmoid(l) - t) * s)
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::CrossEntropy { x, classes } => {
                let xv = self.value(*x);
                let k = xv.cols();
                let s = g[0] / T::c(classes.len() as f64);
                let mut dx = xv.data().to_vec();
                for (row, &c) in dx.chunks_mut(k).zip(classes) {
                    softmax_in_place(row);
                    row[c] -= T::one();
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    accumulate(grads, v, &[1], vec![g[0] * w]);
                }
            }
            Op::DotConst { x, w } => {
                let dx = w.iter().map(|&wv| wv * g[0]).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: Vec<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&d) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, d).expect("gradient shape")),
    }
}

fn row_offsets(mask: &AttnMask) -> Vec<usize> {
    let mut off = Vec::with_capacity(mask.n + 1);
    off.push(0);
    for r in &mask.allowed {
        off.push(off.last().unwrap() + r.len());
    }
    off
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let x2 = x * x;
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x2 * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x2);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}
