use mcc_core::geometry::{build_gt_cloud, label_queries, Vec3};
use mcc_core::synthdata::*;
use mcc_core::train::{prepare_view, sample_queries, SceneData};
use mcc_core::config::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn render(scene: &SceneSpec, views: usize, size: usize) -> Vec<mcc_core::geometry::RgbdFrame> {
    let v = object_views(views, OBJECT_CAMERA_DISTANCE, size).unwrap();
    render_views(scene, &v, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(scene.seed)).unwrap()
}

#[test]
fn generation_is_deterministic_and_valid() {
    for seed in 0..40 {
        let a = generate_scene(seed, &SceneParams::object()).unwrap();
        assert_eq!(a, generate_scene(seed, &SceneParams::object()).unwrap());
        a.validate().unwrap();
        assert!((1..=3).contains(&a.primitives.len()));
        let s = generate_scene(seed, &SceneParams::scene()).unwrap();
        s.validate().unwrap();
        assert!((4..=8).contains(&s.primitives.len()));
    }
    assert_ne!(
        generate_scene(1, &SceneParams::object()).unwrap(),
        generate_scene(2, &SceneParams::object()).unwrap()
    );
}

#[test]
fn rendered_surfaces_lie_on_the_analytic_surface() {
    for seed in 0..5 {
        let scene = generate_scene(seed, &SceneParams::object()).unwrap();
        let frames = render(&scene, 6, 32);
        let gt = build_gt_cloud(&frames).unwrap();
        assert!(!gt.is_empty());
        for p in &gt.positions {
            assert!(analytic_distance(&scene, p) <= 1e-6, "seed {seed}: {p:?}");
        }
    }
}

#[test]
fn rendering_is_deterministic_including_noise() {
    let scene = generate_scene(3, &SceneParams::object()).unwrap();
    let v = object_views(3, OBJECT_CAMERA_DISTANCE, 16).unwrap();
    let a = render_views(&scene, &v, 0.01, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = render_views(&scene, &v, 0.01, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.depth), bits(&y.depth));
    }
    let unknown = a[0].depth.iter().filter(|d| d.is_nan()).count();
    assert!(unknown > 0);
    assert!(render_views(&scene, &v, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn proxy_labels_agree_with_the_oracle() {
    let config = ModelConfig::desk();
    for seed in [11, 12] {
        let scene = generate_scene(seed, &SceneParams::object()).unwrap();
        let data = SceneData::new(render(&scene, 32, 64)).unwrap();
        let view = prepare_view(&data.frames, &data.gt, 0, SceneMode::Object).unwrap();
        let q = sample_queries(&mut ChaCha8Rng::seed_from_u64(seed), 10_000, SceneMode::Object, &config);
        let labels = label_queries(&q, &view.gt, config.tau).unwrap();
        let agree = q
            .iter()
            .zip(&labels.occupied)
            .filter(|(q, &l)| {
                let oracle = analytic_distance(&scene, &view.norm.invert(q)) / view.norm.scale <= config.tau;
                oracle == l
            })
            .count();
        assert!(agree as f64 >= 0.98 * q.len() as f64, "seed {seed}: {agree}");
    }
}

#[test]
fn primitive_distances() {
    let sphere = Primitive {
        kind: PrimitiveKind::Sphere,
        center: Vec3::new(1.0, 0.0, 0.0),
        params: [0.5, 0.0, 0.0],
        albedo: [0.5; 3],
        orientation: nalgebra::Matrix3::identity(),
    };
    assert!((sphere.signed_distance(&Vec3::new(1.0, 0.0, 2.0)) - 1.5).abs() < 1e-12);
    assert!((sphere.signed_distance(&Vec3::new(1.0, 0.0, 0.0)) + 0.5).abs() < 1e-12);
    let hit = sphere.intersect(&Vec3::new(1.0, 0.0, -5.0), &Vec3::z(), 0.0).unwrap();
    assert!((hit.0 - 4.5).abs() < 1e-12);
    assert!((hit.1 - Vec3::new(0.0, 0.0, -1.0)).amax() < 1e-12);
    let cube = Primitive {
        kind: PrimitiveKind::Box,
        center: Vec3::zeros(),
        params: [1.0, 1.0, 1.0],
        ..sphere.clone()
    };
    assert!((cube.signed_distance(&Vec3::new(2.0, 2.0, 0.0)) - 2f64.sqrt()).abs() < 1e-12);
    assert!((cube.signed_distance(&Vec3::new(0.5, 0.0, 0.0)) + 0.5).abs() < 1e-12);
    let cyl = Primitive {
        kind: PrimitiveKind::Cylinder,
        center: Vec3::zeros(),
        params: [1.0, 2.0, 0.0],
        ..sphere
    };
    assert!((cyl.signed_distance(&Vec3::new(3.0, 0.0, 0.0)) - 2.0).abs() < 1e-12);
    assert!((cyl.signed_distance(&Vec3::new(0.0, 0.0, 3.0)) - 1.0).abs() < 1e-12);
}
