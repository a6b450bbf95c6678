use mcc_core::config::{ModelConfig, RunConfig};
use mcc_core::geometry::{label_queries, Mat3, QueryBatch, Vec3};
use mcc_core::model::{DecoderOutput, Mcc};
use mcc_core::nn::{cosine_lr, AdamState};
use mcc_core::synthdata::*;
use mcc_core::train::*;
use mcc_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::desk();
    run.model = ModelConfig {
        image_size: 16,
        patch_size: 4,
        enc_dim: 16,
        enc_layers: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_layers: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        n_queries: 64,
        ..ModelConfig::desk()
    };
    run.train.total_steps = 20;
    run.train.log_interval = 5;
    run.train.seed = 3;
    run
}

fn scene_data(seed: u64, views: usize, size: usize) -> (SceneSpec, SceneData) {
    let scene = generate_scene(seed, &SceneParams::object()).unwrap();
    let views = object_views(views, OBJECT_CAMERA_DISTANCE, size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = render_views(&scene, &views, 0.0, 0.0, &mut rng).unwrap();
    (scene, SceneData::new(frames).unwrap())
}

fn uniform_output(n: usize, occ: f64) -> DecoderOutput<f64> {
    DecoderOutput {
        occupancy_logits: vec![occ; n],
        color_logits: vec![0.0; n * 768],
    }
}

#[test]
fn loss_of_confident_negatives_vanishes() {
    let labels = QueryBatch {
        points: vec![Vec3::zeros(); 4],
        occupied: vec![false; 4],
        color_bins: vec![[0; 3]; 4],
    };
    let l = compute_loss(&uniform_output(4, -30.0), &labels, 0.1).unwrap();
    assert!(l.total < 1e-12 && l.total >= 0.0, "{l:?}");
    assert_eq!(l.color, 0.0);
}

#[test]
fn loss_of_uniform_logits_is_ln2_plus_ln256() {
    let labels = QueryBatch {
        points: vec![Vec3::zeros()],
        occupied: vec![true],
        color_bins: vec![[10, 200, 255]],
    };
    let l = compute_loss(&uniform_output(1, 0.0), &labels, 1.0).unwrap();
    let expect = 2f64.ln() + 256f64.ln();
    assert!((l.total - expect).abs() < 1e-12, "{}", l.total);
    assert!((expect - 6.238).abs() < 5e-4);
}

#[test]
fn zero_color_weight_leaves_color_head_without_gradient() {
    let run = tiny_run();
    let (_, data) = scene_data(2, 4, 16);
    let view = prepare_view(&data.frames, &data.gt, 0, SceneMode::Object).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sample = loop {
        let s = make_sample(&view, &mut rng, &run).unwrap();
        if s.labels.positive_count() > 0 {
            break s;
        }
    };
    let model = Mcc::<f64>::init(run.model.clone(), 1).unwrap();
    let (_, grads) = sample_gradients(&model, &sample, 0.0).unwrap();
    for name in ["head.color.w", "head.color.b"] {
        let id = model.params.id(name).unwrap();
        assert!(grads[id.index()].data().iter().all(|&g| g == 0.0), "{name}");
    }
    let (_, grads) = sample_gradients(&model, &sample, 0.1).unwrap();
    let id = model.params.id("head.color.b").unwrap();
    assert!(grads[id.index()].data().iter().any(|&g| g != 0.0));
}

#[test]
fn zero_color_weight_run_keeps_color_head_fixed() {
    let mut run = tiny_run();
    run.train.color_weight = 0.0;
    run.train.total_steps = 8;
    run.train.log_interval = 4;
    let (_, data) = scene_data(2, 4, 16);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint: dir.path().join("c.ckpt"),
        ..Default::default()
    };
    let data = Dataset::Memory(vec![data]);
    let report = train_loop(&data, &run, &opts).unwrap();
    let init = Mcc::<f64>::init(run.model.clone(), run.train.seed).unwrap().cast::<f32>();
    for name in ["head.color.w", "head.color.b"] {
        let id = init.params.id(name).unwrap();
        assert_eq!(init.params.get(id), report.model.params.get(id), "{name}");
    }
    let id = init.params.id("head.occ.w").unwrap();
    assert_ne!(init.params.get(id), report.model.params.get(id));
}

#[test]
fn identity_augmentation_changes_nothing() {
    let run = tiny_run();
    let (_, data) = scene_data(4, 4, 16);
    let view = prepare_view(&data.frames, &data.gt, 1, SceneMode::Object).unwrap();
    let aug = apply_augmentation(&view, &run.model, 1.0, Mat3::identity());
    assert_eq!(aug.input, view.input);
    assert_eq!(aug.gt, view.gt);
}

#[test]
fn rotation_is_an_isometry_and_commutes_with_labeling() {
    let run = tiny_run();
    let (_, data) = scene_data(5, 6, 16);
    let view = prepare_view(&data.frames, &data.gt, 0, SceneMode::Object).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let aug = augment(&view, &mut rng, &run.train, &run.model).unwrap();
        let (a, b) = (&view.gt.positions, &aug.gt.positions);
        for i in (0..a.len()).step_by(97) {
            for j in (0..a.len()).step_by(89) {
                assert!(((a[i] - a[j]).norm() - (b[i] - b[j]).norm()).abs() <= 1e-9);
            }
        }
        let queries = sample_queries(&mut rng, 1000, SceneMode::Object, &run.model);
        let before = label_queries(&queries, &view.gt, run.model.tau).unwrap();
        let rotated: Vec<Vec3> = queries.iter().map(|q| aug.rotation * q).collect();
        let after = label_queries(&rotated, &aug.gt, run.model.tau).unwrap();
        assert_eq!(before.occupied, after.occupied);
        assert!(before.positive_count() > 0);
        let r = aug.rotation;
        for (p, &ok) in aug.input.points.iter().zip(&aug.input.valid) {
            if ok {
                assert!(p.iter().all(|v| v.is_finite()));
            }
        }
        assert!((r.transpose() * r - Mat3::identity()).amax() <= 1e-12);
    }
}

#[test]
fn scale_augmentation_keeps_point_values() {
    let run = tiny_run();
    let (_, data) = scene_data(6, 4, 16);
    let view = prepare_view(&data.frames, &data.gt, 2, SceneMode::Object).unwrap();
    let aug = apply_augmentation(&view, &run.model, 1.2, Mat3::identity());
    for (p, &ok) in aug.input.points.iter().zip(&aug.input.valid) {
        if ok {
            assert!(view.input.points.contains(p));
        }
    }
    let shrunk = apply_augmentation(&view, &run.model, 0.8, Mat3::identity());
    assert!(!shrunk.input.valid[0]);
    assert_eq!(shrunk.input.image[0], [0.0; 3]);
}

#[test]
fn unit_sphere_yields_positive_queries() {
    let scene = SceneSpec {
        primitives: vec![Primitive {
            kind: PrimitiveKind::Sphere,
            center: Vec3::zeros(),
            params: [1.0, 0.0, 0.0],
            albedo: [0.5; 3],
            orientation: Mat3::identity(),
        }],
        seed: 0,
        mode: SceneMode::Object,
    };
    let views = object_views(8, OBJECT_CAMERA_DISTANCE, 32).unwrap();
    let frames = render_views(&scene, &views, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = SceneData::new(frames).unwrap();
    let view = prepare_view(&data.frames, &data.gt, 0, SceneMode::Object).unwrap();
    let config = ModelConfig::desk();
    let q = sample_queries(&mut ChaCha8Rng::seed_from_u64(1), 10_000, SceneMode::Object, &config);
    let labels = label_queries(&q, &view.gt, config.tau).unwrap();
    assert!(labels.positive_count() > 0);
}

#[test]
fn warmup_reaches_base_rate() {
    let (total, w, base) = (2000, 0.05, 1e-3);
    assert!((cosine_lr(100, total, w, base) - base).abs() <= 1e-12);
    assert_eq!(cosine_lr(0, total, w, base), 0.0);
    assert!(cosine_lr(50, total, w, base) < base);
    assert!(cosine_lr(total, total, w, base).abs() <= 1e-12);
}

#[test]
fn seeded_runs_and_resume_are_bitwise_reproducible() {
    let run = tiny_run();
    let (_, a) = scene_data(7, 4, 16);
    let (_, b) = scene_data(8, 4, 16);
    let data = Dataset::Memory(vec![a, b]);
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n);

    let full = |ck: &str, log: &str| {
        let opts = TrainOptions {
            checkpoint: path(ck),
            log: Some(path(log)),
            ..Default::default()
        };
        train_loop(&data, &run, &opts).unwrap()
    };
    let r1 = full("a.ckpt", "a.csv");
    let r2 = full("b.ckpt", "b.csv");
    assert_eq!(std::fs::read(path("a.ckpt")).unwrap(), std::fs::read(path("b.ckpt")).unwrap());
    assert_eq!(r1.log, r2.log);
    assert_eq!(r1.log.len(), 4);

    let csv = std::fs::read_to_string(path("a.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + 20 / 5);
    assert!(lines[1].starts_with("5,"));

    let first = TrainOptions {
        checkpoint: path("c.ckpt"),
        log: Some(path("c.csv")),
        stop_after: Some(10),
        ..Default::default()
    };
    let part = train_loop(&data, &run, &first).unwrap();
    assert_eq!(part.steps_done, 10);
    let rest = TrainOptions {
        checkpoint: path("c.ckpt"),
        log: Some(path("c.csv")),
        resume: Some(path("c.ckpt")),
        ..Default::default()
    };
    let resumed = train_loop(&data, &run, &rest).unwrap();
    assert_eq!(resumed.steps_done, 20);
    assert_eq!(std::fs::read(path("a.ckpt")).unwrap(), std::fs::read(path("c.ckpt")).unwrap());
    assert_eq!(csv, std::fs::read_to_string(path("c.csv")).unwrap());
}

#[test]
fn resume_rejects_a_different_model() {
    let run = tiny_run();
    let (_, a) = scene_data(7, 4, 16);
    let data = Dataset::Memory(vec![a]);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x.ckpt");
    let mut short = run.clone();
    short.train.total_steps = 5;
    train_loop(&data, &short, &TrainOptions { checkpoint: ck.clone(), ..Default::default() }).unwrap();
    let mut other = run.clone();
    other.model.dec_layers = 2;
    let err = train_loop(
        &data,
        &other,
        &TrainOptions {
            checkpoint: dir.path().join("y.ckpt"),
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap_err();
    match err {
        Error::ConfigMismatch(d) => assert_eq!(d, vec!["dec_layers: 1 != 2".to_string()]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_data_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Dataset::open(dir.path()).is_err());
    assert!(Dataset::open(&dir.path().join("absent")).is_err());
}

#[test]
fn non_finite_loss_aborts() {
    let run = tiny_run();
    let (_, data) = scene_data(2, 4, 16);
    let view = prepare_view(&data.frames, &data.gt, 0, SceneMode::Object).unwrap();
    let sample = make_sample(&view, &mut ChaCha8Rng::seed_from_u64(0), &run).unwrap();
    let mut model = Mcc::<f32>::init(run.model.clone(), 1).unwrap();
    let id = model.params.id("head.occ.b").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let mut state = AdamState::new(&model.params);
    let err = train_step(&mut model, &mut state, &[sample], 0, &run.train).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn steps_mostly_reduce_the_loss_on_their_batch() {
    let mut run = tiny_run();
    run.train.total_steps = 60;
    run.train.scale_aug_min = 1.0;
    run.train.scale_aug_max = 1.0;
    run.train.rotation_aug = false;
    let (_, data) = scene_data(9, 4, 16);
    let data = Dataset::Memory(vec![data]);
    let mut model = Mcc::<f64>::init(run.model.clone(), 0).unwrap().cast::<f32>();
    let mut state = AdamState::new(&model.params);
    let (mut better, mut total) = (0, 0);
    for step in 0..run.train.total_steps {
        let batch = draw_batch(&data, &run, step).unwrap();
        let before = evaluate_loss(&model, &batch, run.train.color_weight).unwrap();
        let stats = train_step(&mut model, &mut state, &batch, step, &run.train).unwrap();
        assert_eq!(stats.loss, before);
        let after = evaluate_loss(&model, &batch, run.train.color_weight).unwrap();
        assert!(after.total.is_finite() && after.occupancy >= 0.0 && after.color >= 0.0);
        if step > 0 {
            total += 1;
            better += (after.total <= before.total) as usize;
        }
    }
    assert!(better as f64 >= 0.8 * total as f64, "{better}/{total}");
}
