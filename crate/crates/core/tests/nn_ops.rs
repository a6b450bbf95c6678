use std::rc::Rc;

use mcc_core::nn::{grad_check, AttnMask, Graph, Tensor, Var, LN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn linear_identity_passes_input_through() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = g.input(Tensor::new(&[3, 3], eye).unwrap());
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    let w = g.input(Tensor::zeros(&[4, 5]));
    let msg = g.linear(x, w, None).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 8], 3.7));
    let gain = g.input(Tensor::full(&[8], 1.0));
    let bias = g.input(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gain, bias, LN_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let x = g.input(rand_tensor(&mut r, &[16, 33], 20.0));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(33) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn single_allowed_key_returns_its_value_row() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let q = g.input(rand_tensor(&mut r, &[1, 8], 1.0));
    let k = g.input(rand_tensor(&mut r, &[5, 8], 1.0));
    let v = g.input(rand_tensor(&mut r, &[5, 8], 1.0));
    let mut dense = vec![false; 5];
    dense[3] = true;
    let mask = Rc::new(AttnMask::from_dense(&dense, 1, 5).unwrap());
    let y = g.attention(q, k, v, Some(mask), 2).unwrap();
    assert_eq!(g.value(y).data(), &g.value(v).data()[24..32]);
}

#[test]
fn full_mask_equals_no_mask_bitwise() {
    let mut r = rng();
    let (qt, kt, vt) = (
        rand_tensor(&mut r, &[4, 12], 1.0),
        rand_tensor(&mut r, &[6, 12], 1.0),
        rand_tensor(&mut r, &[6, 12], 1.0),
    );
    let run = |mask: Option<Rc<AttnMask>>| {
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let y = g.attention(q, k, v, mask, 3).unwrap();
        g.value(y).clone()
    };
    let full = Rc::new(AttnMask::from_dense(&[true; 24], 4, 6).unwrap());
    assert_eq!(run(None), run(Some(full)));
}

#[test]
fn all_false_mask_row_is_an_error() {
    let mut dense = vec![true; 6];
    dense[3..].fill(false);
    assert!(AttnMask::from_dense(&dense, 2, 3).is_err());
}

#[test]
fn masked_value_rows_get_exactly_zero_gradient() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let q = g.input(rand_tensor(&mut r, &[3, 8], 1.0));
    let k = g.input(rand_tensor(&mut r, &[5, 8], 1.0));
    let v = g.input(rand_tensor(&mut r, &[5, 8], 1.0));
    // No query may look at key 2.
    let mut dense = vec![true; 15];
    for i in 0..3 {
        dense[i * 5 + 2] = false;
    }
    let mask = Rc::new(AttnMask::from_dense(&dense, 3, 5).unwrap());
    let y = g.attention(q, k, v, Some(mask), 2).unwrap();
    let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let s = g.dot_const(y, &w).unwrap();
    let grads = g.backward(s).unwrap();
    let dv = grads.wrt(v).unwrap().data();
    assert!(dv[16..24].iter().all(|&x| x == 0.0));
    let dk = grads.wrt(k).unwrap().data();
    assert!(dk[16..24].iter().all(|&x| x == 0.0));
    assert!(dv[..16].iter().any(|&x| x != 0.0));
}

#[test]
fn loss_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(0.0));
    let l = g.bce_with_logits(x, &[true]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

    let x = g.input(Tensor::scalar(30.0));
    let l = g.bce_with_logits(x, &[true]).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite() && v < 1e-12);

    let x = g.input(Tensor::scalar(-30.0));
    let l = g.bce_with_logits(x, &[false]).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let x = g.input(Tensor::zeros(&[1, 256]));
    for c in [0, 17, 255] {
        let l = g.cross_entropy(x, &[c]).unwrap();
        assert!((g.value(l).item() - 256f64.ln()).abs() < 1e-12);
    }
    assert!(g.cross_entropy(x, &[256]).is_err());
}

#[test]
fn checked_graph_rejects_non_finite_values() {
    let mut g = Graph::<f64>::checked();
    let x = g.input(Tensor::scalar(f64::MAX));
    assert!(g.scale(x, 10.0).is_err());
}

// --- gradient checks (64-bit, primitive-op tolerance 1e-5) ---

const PRIM_TOL: f64 = 1e-5;

fn check<F>(op: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> mcc_core::Result<Var>,
{
    let rep = grad_check(op, inputs, 1e-5).unwrap();
    assert!(rep.checked > 0);
    rep.max_rel_err
}

#[test]
fn grad_linear() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[4, 4], 1.0),
        rand_tensor(&mut r, &[4, 4], 1.0),
        rand_tensor(&mut r, &[4], 1.0),
    ];
    let e = check(|g, v| g.linear(v[0], v[1], Some(v[2])), &ins);
    assert!(e <= 1e-6, "{e}");
}

#[test]
fn grad_layer_norm_gelu_softmax() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[3, 6], 2.0),
        rand_tensor(&mut r, &[6], 1.5),
        rand_tensor(&mut r, &[6], 1.0),
    ];
    let e = check(|g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS), &ins);
    assert!(e <= PRIM_TOL, "layer_norm {e}");
    let e = check(|g, v| g.gelu(v[0]), &ins[..1]);
    assert!(e <= PRIM_TOL, "gelu {e}");
    let e = check(|g, v| g.softmax(v[0]), &ins[..1]);
    assert!(e <= PRIM_TOL, "softmax {e}");
}

#[test]
fn grad_masked_attention_three_queries_five_keys() {
    let mut r = rng();
    let mut dense = vec![false; 15];
    for i in 0..3 {
        for j in 0..5 {
            dense[i * 5 + j] = r.random_bool(0.6);
        }
        dense[i * 5 + r.random_range(0..5)] = true;
    }
    let mask = Rc::new(AttnMask::from_dense(&dense, 3, 5).unwrap());
    let ins = [
        rand_tensor(&mut r, &[3, 8], 1.0),
        rand_tensor(&mut r, &[5, 8], 1.0),
        rand_tensor(&mut r, &[5, 8], 1.0),
    ];
    let e = check(
        |g, v| g.attention(v[0], v[1], v[2], Some(mask.clone()), 2),
        &ins,
    );
    assert!(e <= PRIM_TOL, "{e}");
}

#[test]
fn grad_batched_attention() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[2, 3, 4], 1.0),
        rand_tensor(&mut r, &[2, 4, 4], 1.0),
        rand_tensor(&mut r, &[2, 4, 4], 1.0),
    ];
    let e = check(|g, v| g.attention(v[0], v[1], v[2], None, 2), &ins);
    assert!(e <= PRIM_TOL, "{e}");
}

#[test]
fn grad_structural_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 4], 1.0);
    let tok = rand_tensor(&mut r, &[4], 1.0);
    let b = rand_tensor(&mut r, &[3, 4], 1.0);
    let e = check(
        |g, v| {
            let p = g.prepend_token(v[0], v[1])?;
            let s = g.add(p, v[2])?;
            let flat = g.reshape(s, &[8, 4])?;
            let picked = g.gather_rows(flat, &[0, 4, 5, 5])?;
            let m = g.mean_rows(flat)?;
            let both = g.concat_rows(&[picked, m])?;
            let wide = g.concat_last(both, both)?;
            g.scale(wide, 0.5)
        },
        &[a, tok, rand_tensor(&mut r, &[4, 4], 1.0)],
    );
    assert!(e <= PRIM_TOL, "{e}");
    let _ = b;

    let x = rand_tensor(&mut r, &[5, 3], 1.0);
    let fill = rand_tensor(&mut r, &[3], 1.0);
    let valid = [true, false, true, false, false];
    let e = check(|g, v| g.select_rows(v[0], v[1], &valid), &[x, fill]);
    assert!(e <= PRIM_TOL, "{e}");
}

#[test]
fn grad_losses() {
    let mut r = rng();
    let logits = rand_tensor(&mut r, &[6], 3.0);
    let targets = [true, false, false, true, true, false];
    let e = check(|g, v| g.bce_with_logits(v[0], &targets), &[logits]);
    assert!(e <= PRIM_TOL, "bce {e}");

    let logits = rand_tensor(&mut r, &[4, 7], 3.0);
    let e = check(|g, v| g.cross_entropy(v[0], &[0, 6, 3, 3]), &[logits]);
    assert!(e <= PRIM_TOL, "ce {e}");

    let a = rand_tensor(&mut r, &[1], 1.0);
    let b = rand_tensor(&mut r, &[1], 1.0);
    let e = check(|g, v| g.weighted_sum(&[(v[0], 1.0), (v[1], 0.1)]), &[a, b]);
    assert!(e <= PRIM_TOL, "weighted_sum {e}");
}
