//! Built-in consistency checks: gradients, decoder masking, labeling and metrics.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::eval::{accuracy, chamfer, completeness};
use crate::geometry::{color_bin, label_queries, PointCloud, QueryBatch, Vec3};
use crate::infer::decode_chunked;
use crate::model::{build_decoder_mask, Builder, DecoderOutput, Mcc, ModelInput};
use crate::nn::{
    grad_check, grad_check_params, param_gradients, AttnMask, GradCheckReport, Graph, ParamId,
    Tensor, Var, LN_EPS,
};
use crate::train::loss_graph;

/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Tolerance for single operations.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for the full forward pass and loss.
pub const MODEL_TOL: f64 = 1e-4;
/// Smallest analytic gradient magnitude sampled by the model check; below
/// this, f64 rounding in the loss dominates a central difference at [`GRAD_STEP`].
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Gradient checks of every differentiable operation on small random inputs.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(String, GradCheckReport, f64)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = vec![false; 15];
    for i in 0..3 {
        for j in 0..5 {
            dense[i * 5 + j] = r.random_bool(0.6);
        }
        dense[i * 5 + r.random_range(0..5)] = true;
    }
    let mask = Rc::new(AttnMask::from_dense(&dense, 3, 5)?);
    let valid = [true, false, true, false, false];
    let mut cases: Vec<(&str, OpFn, Vec<Tensor<f64>>, f64)> = Vec::new();
    let m44 = |r: &mut ChaCha8Rng| rand_tensor(r, &[4, 4], 1.0);
    cases.push((
        "linear",
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        vec![m44(&mut r), m44(&mut r), rand_tensor(&mut r, &[4], 1.0)],
        1e-6,
    ));
    let x36 = rand_tensor(&mut r, &[3, 6], 2.0);
    cases.push((
        "layer_norm",
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS)),
        vec![x36.clone(), rand_tensor(&mut r, &[6], 1.5), rand_tensor(&mut r, &[6], 1.0)],
        PRIMITIVE_TOL,
    ));
    cases.push(("gelu", Box::new(|g, v| g.gelu(v[0])), vec![x36.clone()], PRIMITIVE_TOL));
    cases.push(("softmax", Box::new(|g, v| g.softmax(v[0])), vec![x36.clone()], PRIMITIVE_TOL));
    cases.push((
        "add",
        Box::new(|g, v| g.add(v[0], v[1])),
        vec![x36.clone(), rand_tensor(&mut r, &[6], 1.0)],
        PRIMITIVE_TOL,
    ));
    cases.push(("scale", Box::new(|g, v| g.scale(v[0], 0.7)), vec![x36.clone()], PRIMITIVE_TOL));
    cases.push((
        "masked_attention",
        Box::new(move |g, v| g.attention(v[0], v[1], v[2], Some(mask.clone()), 2)),
        vec![
            rand_tensor(&mut r, &[3, 8], 1.0),
            rand_tensor(&mut r, &[5, 8], 1.0),
            rand_tensor(&mut r, &[5, 8], 1.0),
        ],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "batched_attention",
        Box::new(|g, v| g.attention(v[0], v[1], v[2], None, 2)),
        vec![
            rand_tensor(&mut r, &[2, 3, 4], 1.0),
            rand_tensor(&mut r, &[2, 4, 4], 1.0),
            rand_tensor(&mut r, &[2, 4, 4], 1.0),
        ],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "tokens_and_rows",
        Box::new(|g, v| {
            let p = g.prepend_token(v[0], v[1])?;
            let s = g.add(p, v[2])?;
            let flat = g.reshape(s, &[8, 4])?;
            let picked = g.gather_rows(flat, &[0, 4, 5, 5])?;
            let m = g.mean_rows(flat)?;
            let both = g.concat_rows(&[picked, m])?;
            g.concat_last(both, both)
        }),
        vec![
            rand_tensor(&mut r, &[2, 3, 4], 1.0),
            rand_tensor(&mut r, &[4], 1.0),
            rand_tensor(&mut r, &[4, 4], 1.0),
        ],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "select_rows",
        Box::new(move |g, v| g.select_rows(v[0], v[1], &valid)),
        vec![rand_tensor(&mut r, &[5, 3], 1.0), rand_tensor(&mut r, &[3], 1.0)],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "bce_with_logits",
        Box::new(|g, v| g.bce_with_logits(v[0], &[true, false, false, true, true, false])),
        vec![rand_tensor(&mut r, &[6], 3.0)],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "cross_entropy",
        Box::new(|g, v| g.cross_entropy(v[0], &[0, 6, 3, 3])),
        vec![rand_tensor(&mut r, &[4, 7], 3.0)],
        PRIMITIVE_TOL,
    ));
    cases.push((
        "weighted_sum",
        Box::new(|g, v| g.weighted_sum(&[(v[0], 1.0), (v[1], 0.1)])),
        vec![rand_tensor(&mut r, &[1], 1.0), rand_tensor(&mut r, &[1], 1.0)],
        PRIMITIVE_TOL,
    ));
    let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    cases.push((
        "dot_const",
        Box::new(move |g, v| g.dot_const(v[0], &w)),
        vec![rand_tensor(&mut r, &[6], 1.0)],
        PRIMITIVE_TOL,
    ));
    cases
        .into_iter()
        .map(|(name, op, ins, tol)| Ok((name.to_string(), grad_check(op, &ins, GRAD_STEP)?, tol)))
        .collect()
}

/// Per parameter tensor: its largest-gradient element plus up to `per_param`
/// random elements, all with gradient magnitude at least `floor`. Tensors
/// whose gradient never reaches `floor` contribute nothing.
pub fn select_coordinates(
    grads: &[Tensor<f64>],
    ids: &[ParamId],
    per_param: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (g, &id) in grads.iter().zip(ids) {
        let d = g.data();
        let Some(top) = (0..d.len()).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())) else {
            continue;
        };
        if d[top].abs() < floor {
            continue;
        }
        out.push((id, top));
        let eligible: Vec<usize> = (0..d.len()).filter(|&i| i != top && d[i].abs() >= floor).collect();
        for _ in 0..per_param.min(eligible.len()) {
            out.push((id, eligible[rng.random_range(0..eligible.len())]));
        }
    }
    out
}

/// A random frame, queries and labels sized for `config`.
pub fn random_example(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ModelInput, QueryBatch) {
    let n = config.image_size * config.image_size;
    let mut unit = |r: f64| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
    let points: Vec<Vec3> = (0..n).map(|_| unit(1.5)).collect();
    let queries: Vec<Vec3> = (0..config.n_queries).map(|_| unit(config.object_range)).collect();
    let valid = (0..n).map(|_| rng.random::<f64>() > 0.2).collect();
    let image = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let occupied = (0..queries.len()).map(|i| i % 3 == 0).collect();
    let color_bins = (0..queries.len())
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    (
        ModelInput { image, points, valid },
        QueryBatch {
            points: queries,
            occupied,
            color_bins,
        },
    )
}

/// Result of [`model_gradcheck`].
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Parameters whose every gradient entry is below [`GRAD_FLOOR`] (for
    /// example attention key biases, which softmax makes exactly irrelevant).
    pub skipped: Vec<String>,
}

/// Gradient check of the full forward pass and loss in f64 on a random example.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, per_param: usize) -> Result<ModelGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mcc::<f64>::init(config.clone(), seed)?;
    let (input, labels) = random_example(config, &mut rng);
    let f = |g: &mut Graph<f64>, store: &crate::nn::ParamStore<f64>| {
        let mut b = Builder::new(g, store);
        let r = b.encode(config, &input)?;
        let (occ, col) = b.decode(config, r, &labels.points)?;
        Ok(loss_graph(g, occ, col, &labels, 0.1)?.0)
    };
    let grads = param_gradients(f, &model.params)?;
    let ids: Vec<ParamId> = model.params.ids().collect();
    let coords = select_coordinates(&grads, &ids, per_param, GRAD_FLOOR, &mut rng);
    let skipped = ids
        .iter()
        .filter(|id| !coords.iter().any(|(c, _)| c == *id))
        .map(|&id| model.params.name(id).to_string())
        .collect();
    Ok(ModelGradCheck {
        report: grad_check_params(f, &model.params, &coords, GRAD_STEP)?,
        skipped,
    })
}

/// The decoder mask against its defining rule for every size up to `max`.
pub fn mask_table_check(max: usize) -> Check {
    for n_enc in 1..=max {
        for n_q in 1..=max {
            let n = 1 + n_enc + n_q;
            let m = build_decoder_mask(n_enc, n_q);
            for i in 0..n {
                for j in 0..n {
                    let expect = j <= n_enc || (i > n_enc && i == j);
                    if m[i * n + j] != expect {
                        return Check::new(
                            "decoder mask table",
                            false,
                            format!("n_enc {n_enc}, n_q {n_q}: entry ({i}, {j}) is {}", m[i * n + j]),
                        );
                    }
                }
            }
        }
    }
    Check::new("decoder mask table", true, format!("all sizes up to {max}x{max}"))
}

/// Bit patterns of query `i`'s occupancy logit and color logits.
fn row_bits(o: &DecoderOutput<f32>, i: usize) -> Vec<u32> {
    let mut r = vec![o.occupancy_logits[i].to_bits()];
    r.extend(o.color_logits[i * 768..(i + 1) * 768].iter().map(|v| v.to_bits()));
    r
}

/// One seeded trial: a query's output is bitwise unchanged when the other
/// queries change, when the batch is reordered, and when decoded in chunks.
pub fn independence_trial(model: &Mcc<f32>, seed: u64, n_q: usize) -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, _) = random_example(&model.config, &mut rng);
    let enc = model.encode(&input)?;
    let r = model.config.object_range;
    let mut draw = |n: usize| -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)))
            .collect()
    };
    let a = draw(n_q);
    let mut b = draw(n_q);
    let base = model.decode(&enc, &a)?;

    let keep = seed as usize % n_q;
    b[keep] = a[keep];
    let perturbed = model.decode(&enc, &b)?;
    if row_bits(&base, keep) != row_bits(&perturbed, keep) {
        return Ok(Some(format!("seed {seed}: output changed when other queries changed")));
    }

    let perm: Vec<usize> = (0..n_q).rev().collect();
    let reordered: Vec<Vec3> = perm.iter().map(|&i| a[i]).collect();
    let ro = model.decode(&enc, &reordered)?;
    for (k, &i) in perm.iter().enumerate() {
        if row_bits(&base, i) != row_bits(&ro, k) {
            return Ok(Some(format!("seed {seed}: reordering changed query {i}")));
        }
    }

    let chunked = decode_chunked(model, &enc, &a, 1 + seed as usize % 7, 1)?;
    if (0..n_q).any(|i| row_bits(&base, i) != row_bits(&chunked, i)) {
        return Ok(Some(format!("seed {seed}: chunked decoding differs")));
    }
    Ok(None)
}

/// Runs `trials` independence trials on a freshly initialized model.
pub fn independence_check(config: &ModelConfig, trials: u64, n_q: usize) -> Result<Check> {
    let model = Mcc::<f32>::init(config.clone(), 17)?;
    for t in 0..trials {
        if let Some(msg) = independence_trial(&model, t, n_q)? {
            return Ok(Check::new("query independence", false, msg));
        }
    }
    Ok(Check::new(
        "query independence",
        true,
        format!("{trials} trials bitwise identical"),
    ))
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    let positions = (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            )
        })
        .collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    PointCloud {
        positions,
        colors: Some(colors),
    }
}

/// Spatial-hash labeling against an exhaustive scan of the ground truth.
pub fn labeling_check(trials: u64, seed: u64) -> Result<Check> {
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let n_gt = rng.random_range(1..=500);
        let gt = random_cloud(&mut rng, n_gt, 1.0);
        let n_q = rng.random_range(1..=500);
        let queries = random_cloud(&mut rng, n_q, 1.2).positions;
        let tau = rng.random_range(0.05..0.3);
        let got = label_queries(&queries, &gt, tau)?;
        let colors = gt.colors.as_ref().expect("random clouds are colored");
        for (i, q) in queries.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, p) in gt.positions.iter().enumerate() {
                let d = (q - p).norm();
                if d <= tau && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            let ok = match best {
                Some((j, _)) => got.occupied[i] && got.color_bins[i] == colors[j].map(|c| color_bin(c).unwrap_or(0)),
                None => !got.occupied[i],
            };
            if !ok {
                return Ok(Check::new("labeling oracle", false, format!("trial {t}, query {i}")));
            }
        }
    }
    Ok(Check::new("labeling oracle", true, format!("{trials} instances exact")))
}

fn brute_within(from: &[Vec3], to: &[Vec3], rho: f64) -> f64 {
    let hits = from.iter().filter(|p| to.iter().any(|q| (*p - q).norm() <= rho)).count();
    100.0 * hits as f64 / from.len() as f64
}

fn brute_mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Worst absolute deviation of the metrics from exhaustive pairwise computation.
pub fn metric_deviation(trials: u64, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let n_pred = rng.random_range(1..=300);
        let pred = random_cloud(&mut rng, n_pred, 1.0);
        let n_gt = rng.random_range(1..=300);
        let gt = random_cloud(&mut rng, n_gt, 1.0);
        let rho = rng.random_range(0.02..0.4);
        let acc = accuracy(&pred, &gt, rho)?;
        let cmp = completeness(&pred, &gt, rho)?;
        let ch = chamfer(&pred, &gt)?;
        let (p, g) = (&pred.positions, &gt.positions);
        let ch_ref = 0.5 * (brute_mean_nearest(p, g) + brute_mean_nearest(g, p));
        worst = worst
            .max((acc - brute_within(p, g, rho)).abs())
            .max((cmp - brute_within(g, p, rho)).abs())
            .max((ch - ch_ref).abs());
    }
    Ok(worst)
}

/// Everything `mcc selftest` runs, at sizes that finish in about a minute.
pub fn run_all(config: &ModelConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, rep, tol) in primitive_gradchecks(1)? {
        out.push(Check::new(
            format!("gradient {name}"),
            rep.max_rel_err <= tol,
            format!("max relative error {:.2e} (tolerance {tol:.0e})", rep.max_rel_err),
        ));
    }
    let mg = model_gradcheck(config, 2, 1)?;
    out.push(Check::new(
        "gradient full model",
        mg.report.max_rel_err <= MODEL_TOL,
        format!(
            "max relative error {:.2e} over {} coordinates (tolerance {MODEL_TOL:.0e}); {} zero-gradient tensors skipped",
            mg.report.max_rel_err,
            mg.report.checked,
            mg.skipped.len()
        ),
    ));
    out.push(mask_table_check(8));
    out.push(independence_check(config, 20, 16)?);
    out.push(labeling_check(20, 3)?);
    let dev = metric_deviation(20, 4)?;
    out.push(Check::new(
        "metric oracle",
        dev <= 1e-12,
        format!("max deviation {dev:.2e}"),
    ));
    Ok(out)
}
