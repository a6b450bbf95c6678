use mcc_core::config::{Conditioning, DecoderMode, ModelConfig};
use mcc_core::geometry::Vec3;
use mcc_core::model::{build_decoder_mask, Mcc, ModelInput};
use mcc_core::nn::{ParamStore, Tensor};
use mcc_core::selftest::{model_gradcheck, select_coordinates, MODEL_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        enc_dim: 16,
        enc_layers: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_layers: 2,
        dec_heads: 2,
        mlp_ratio: 2,
        xyz_mlp_ratio: 2,
        n_queries: 8,
        ..ModelConfig::desk()
    }
}

fn random_input(rng: &mut ChaCha8Rng, size: usize, invalid_frac: f64) -> ModelInput {
    let n = size * size;
    let mut valid: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= invalid_frac).collect();
    valid[0] = true;
    let points = valid
        .iter()
        .map(|&ok| {
            if ok {
                Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let image = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    ModelInput { image, points, valid }
}

fn random_queries(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect()
}

/// Logits of query `i`: occupancy followed by its 768 color logits.
fn row<T: Copy>(occ: &[T], col: &[T], i: usize) -> Vec<T> {
    let mut r = vec![occ[i]];
    r.extend_from_slice(&col[i * 768..(i + 1) * 768]);
    r
}

fn variants() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for mode in [DecoderMode::ConcatAttn, DecoderMode::CrossAttn] {
        for cond in [Conditioning::Detailed, Conditioning::Global] {
            out.push(ModelConfig {
                decoder_mode: mode,
                conditioning: cond,
                ..tiny()
            });
        }
    }
    out
}

#[test]
fn mask_matches_rule_for_small_sizes() {
    for n_enc in 1..=8 {
        for n_q in 1..=8 {
            let n = 1 + n_enc + n_q;
            let m = build_decoder_mask(n_enc, n_q);
            assert_eq!(m.len(), n * n);
            for i in 0..n {
                for j in 0..n {
                    let expect = j <= n_enc || (i > n_enc && i == j);
                    assert_eq!(m[i * n + j], expect, "n_enc {n_enc} n_q {n_q} ({i},{j})");
                }
            }
        }
    }
    let m = build_decoder_mask(3, 1);
    assert!(m[4 * 5..].iter().all(|&b| b));
}

#[test]
fn query_output_ignores_other_queries() {
    for (v, config) in variants().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(v as u64);
        let model = Mcc::<f32>::init(config, 3).unwrap();
        let enc = model.encode(&random_input(&mut rng, 16, 0.2)).unwrap();
        let a = random_queries(&mut rng, 40);
        let mut b = random_queries(&mut rng, 40);
        b[17] = a[5];
        let oa = model.decode(&enc, &a).unwrap();
        let ob = model.decode(&enc, &b).unwrap();
        assert_eq!(
            row(&oa.occupancy_logits, &oa.color_logits, 5),
            row(&ob.occupancy_logits, &ob.color_logits, 17),
            "variant {v}"
        );
        let single = model.decode(&enc, &a[5..6]).unwrap();
        assert_eq!(
            row(&oa.occupancy_logits, &oa.color_logits, 5),
            row(&single.occupancy_logits, &single.color_logits, 0)
        );
    }
}

#[test]
fn reordering_queries_reorders_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Mcc::<f32>::init(tiny(), 5).unwrap();
    let enc = model.encode(&random_input(&mut rng, 16, 0.1)).unwrap();
    let q = random_queries(&mut rng, 33);
    let mut perm: Vec<usize> = (0..q.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffled: Vec<Vec3> = perm.iter().map(|&i| q[i]).collect();
    let o = model.decode(&enc, &q).unwrap();
    let s = model.decode(&enc, &shuffled).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(
            row(&o.occupancy_logits, &o.color_logits, i),
            row(&s.occupancy_logits, &s.color_logits, k)
        );
    }
}

#[test]
fn duplicate_queries_get_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Mcc::<f32>::init(tiny(), 6).unwrap();
    let enc = model.encode(&random_input(&mut rng, 16, 0.0)).unwrap();
    let q = vec![Vec3::new(0.3, -0.2, 1.1); 7];
    let o = model.decode(&enc, &q).unwrap();
    for i in 1..7 {
        assert_eq!(
            row(&o.occupancy_logits, &o.color_logits, 0),
            row(&o.occupancy_logits, &o.color_logits, i)
        );
    }
}

#[test]
fn without_rgb_the_image_is_ignored() {
    let config = ModelConfig {
        use_rgb: false,
        ..tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Mcc::<f32>::init(config, 7).unwrap();
    let a = random_input(&mut rng, 16, 0.2);
    let mut b = a.clone();
    for c in &mut b.image {
        *c = [rng.random(), rng.random(), rng.random()];
    }
    let q = random_queries(&mut rng, 10);
    assert_eq!(model.predict(&a, &q).unwrap(), model.predict(&b, &q).unwrap());
    assert!(model.params.iter().all(|p| !p.name().starts_with("rgb.")));
}

#[test]
fn invalid_pixel_coordinates_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = Mcc::<f32>::init(tiny(), 8).unwrap();
    let a = random_input(&mut rng, 16, 0.3);
    let mut b = a.clone();
    for (p, &ok) in b.points.iter_mut().zip(&a.valid) {
        if !ok {
            *p = Vec3::new(rng.random_range(-9.0..9.0), 4.0, -7.0);
        }
    }
    assert_eq!(model.encode(&a).unwrap(), model.encode(&b).unwrap());
}

#[test]
fn pixel_order_within_a_patch_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let config = ModelConfig {
        use_rgb: false,
        ..tiny()
    };
    let model = Mcc::<f64>::init(config, 9).unwrap();
    let a = random_input(&mut rng, 16, 0.3);
    let mut b = a.clone();
    // Reverse the pixels of the top-left 4x4 patch.
    let idx: Vec<usize> = (0..4).flat_map(|y| (0..4).map(move |x| y * 16 + x)).collect();
    for (k, &i) in idx.iter().enumerate() {
        let j = idx[15 - k];
        b.points[i] = a.points[j];
        b.valid[i] = a.valid[j];
    }
    let ra = model.encode(&a).unwrap().r;
    let rb = model.encode(&b).unwrap().r;
    let diff = ra.data().iter().zip(rb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn all_invalid_patches_and_frames_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let model = Mcc::<f32>::init(tiny(), 10).unwrap();
    let mut input = random_input(&mut rng, 16, 0.0);
    for y in 0..4 {
        for x in 0..4 {
            input.valid[y * 16 + x] = false;
        }
    }
    let q = random_queries(&mut rng, 5);
    let out = model.predict(&input, &q).unwrap();
    assert!(out.iter().all(|(s, _)| s.is_finite()));
    input.valid.fill(false);
    let out = model.predict(&input, &q).unwrap();
    assert!(out.iter().all(|(s, _)| s.is_finite()));
}

#[test]
fn initialization_and_inference_are_deterministic() {
    let a = Mcc::<f32>::init(tiny(), 21).unwrap();
    let b = Mcc::<f32>::init(tiny(), 21).unwrap();
    let c = Mcc::<f32>::init(tiny(), 22).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_input(&mut rng, 16, 0.1);
    let q = random_queries(&mut rng, 12);
    assert_eq!(a.predict(&input, &q).unwrap(), b.predict(&input, &q).unwrap());
}

#[test]
fn zeroed_heads_predict_one_half() {
    let mut model = Mcc::<f32>::init(tiny(), 4).unwrap();
    for name in ["head.occ.w", "head.occ.b"] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = model
        .predict(&random_input(&mut rng, 16, 0.0), &random_queries(&mut rng, 9))
        .unwrap();
    assert!(out.iter().all(|(s, _)| *s == 0.5));
}

#[test]
fn encoder_runs_once_per_frame() {
    let model = Mcc::<f32>::init(tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_input(&mut rng, 16, 0.0);
    let enc = model.encode(&input).unwrap();
    for _ in 0..5 {
        model.decode(&enc, &random_queries(&mut rng, 20)).unwrap();
    }
    assert_eq!(model.encode_calls(), 1);
}

#[test]
fn rejects_mismatched_parameters() {
    let model = Mcc::<f32>::init(tiny(), 4).unwrap();
    let other = ModelConfig {
        enc_dim: 32,
        ..tiny()
    };
    assert!(Mcc::from_params(other, model.params.clone()).is_err());
    let mut store = ParamStore::<f32>::new();
    store.insert("rgb.patch.w", Tensor::zeros(&[48, 16])).unwrap();
    assert!(Mcc::from_params(tiny(), store).is_err());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for (v, config) in variants().into_iter().enumerate() {
        let config = ModelConfig {
            image_size: 8,
            enc_dim: 8,
            dec_dim: 8,
            dec_layers: 1,
            ..config
        };
        let check = model_gradcheck(&config, 40 + v as u64, 2).unwrap();
        let report = check.report;
        assert!(report.checked > 100);
        assert!(check.skipped.iter().any(|n| n == "dec.blocks.0.k.b"), "{:?}", check.skipped);
        assert!(report.max_rel_err <= MODEL_TOL, "variant {v}: {report:?}");
    }
}

#[test]
fn coordinate_selection_skips_noise_level_gradients() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::zeros(&[4])).unwrap();
    let g = Tensor::new(&[4], vec![1e-9, -3.0, 2e-6, 1e-7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let picked = select_coordinates(&[g], &[id], 5, 1e-6, &mut rng);
    assert_eq!(picked[0], (id, 1));
    assert!(picked[1..].iter().all(|&(_, e)| e == 2));
    let flat = Tensor::new(&[4], vec![1e-9, -3e-7, 2e-8, 0.0]).unwrap();
    assert!(select_coordinates(&[flat], &[id], 5, 1e-6, &mut rng).is_empty());
}
