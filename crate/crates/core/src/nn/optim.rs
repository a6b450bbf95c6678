use crate::error::{Error, Result};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.iter().nth(i).unwrap().shape() {
            return Err(Error::shape("adam_step gradient", g.shape(), state.m[i].shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                params.iter().nth(i).unwrap().name()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::c(lr), T::c(cfg.eps));
    let one = T::one();
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warm-up to `base` over the first `warmup_frac · total` steps, then
/// cosine decay to zero at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup_frac: f64, base: f64) -> f64 {
    let warm = warmup_frac * total as f64;
    let s = step as f64;
    if s < warm {
        return base * s / warm;
    }
    let span = total as f64 - warm;
    if span <= 0.0 {
        return base;
    }
    let p = ((s - warm) / span).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
