//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::params::{ParamId, ParamStore};
use super::{Graph, Tensor, Var};

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: (0, 0),
        }
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = e;
            self.worst = (input, elem);
        }
    }
}

/// Reduces a (possibly non-scalar) output to a scalar with a fixed random projection.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot_const(out, &w)
}

/// Checks every element of every input of `op`.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::checked();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let s = scalarize(&mut g, out)?;
        Ok(g.value(s).item())
    };

    let mut g = Graph::checked();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let s = scalarize(&mut g, out)?;
    let grads = g.backward(s)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = x0;
            report.record(i, e, analytic[e], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Reverse-mode gradients of a scalar function of a parameter store, one tensor per parameter.
pub fn param_gradients<F>(f: F, store: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::checked();
    let out = f(&mut g, store)?;
    Ok(g.backward(out)?.params(&g, store))
}

/// Checks selected parameter elements of a scalar-valued function of a parameter store.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let grads = param_gradients(&f, store)?;

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for &(id, e) in coords {
        let x0 = store.get(id).data()[e];
        let mut eval_at = |x: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[e] = x;
            let mut g = Graph::checked();
            let out = f(&mut g, &work)?;
            Ok(g.value(out).item())
        };
        let fp = eval_at(x0 + h)?;
        let fm = eval_at(x0 - h)?;
        work.get_mut(id).data_mut()[e] = x0;
        report.record(id.index(), e, grads[id.index()].data()[e], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}
