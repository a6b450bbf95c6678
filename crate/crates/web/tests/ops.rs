use mcc_web::ops::*;

#[test]
fn render_view_lays_out_color_and_depth() {
    let size = 24;
    let px = render_view(4, 0, 8, size).unwrap();
    assert_eq!(px.len(), 2 * size * size * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    let depth: Vec<u8> = (0..size * size).map(|i| px[((i / size) * 2 * size + size + i % size) * 4]).collect();
    // The object sits in the middle of every view, the corners show background.
    assert!(depth[(size / 2) * size + size / 2] > 0);
    assert_eq!(depth[0], 0);
    assert_eq!(render_view(4, 0, 8, size).unwrap(), px);
    assert!(render_view(4, 8, 8, size).is_err());
}

#[test]
fn slice_marks_primitive_centers_as_interior() {
    let res = 101;
    for seed in 0..5 {
        let scene = scene(seed).unwrap();
        for p in &scene.primitives {
            if p.center.iter().any(|c| c.abs() >= SLICE_EXTENT) {
                continue;
            }
            let px = oracle_slice(seed, 2, p.center.z, res, 0.05).unwrap();
            assert_eq!(px.len(), res * res * 4);
            let step = 2.0 * SLICE_EXTENT / res as f64;
            let col = ((p.center.x + SLICE_EXTENT) / step) as usize;
            let row = ((SLICE_EXTENT - p.center.y) / step) as usize;
            let i = (row * res + col) * 4;
            assert_eq!(&px[i..i + 3], &[40, 70, 160], "seed {seed} {:?}", p.kind);
        }
    }
    assert!(oracle_slice(0, 3, 0.0, 10, 0.1).is_err());
    assert!(oracle_slice(0, 0, 0.0, 10, 0.0).is_err());
}

#[test]
fn mask_follows_the_attention_rule() {
    for (n_enc, n_q) in [(1, 1), (3, 5), (16, 4)] {
        let m = decoder_mask(n_enc, n_q).unwrap();
        let n = 1 + n_enc + n_q;
        assert_eq!(m.len(), n * n);
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), n * (1 + n_enc) + n_q);
        for i in 1 + n_enc..n {
            for j in 1 + n_enc..n {
                assert_eq!(m[i * n + j] == 1, i == j);
            }
        }
    }
    assert!(decoder_mask(0, 3).is_err());
}

#[test]
fn description_lists_each_primitive() {
    let text = describe(2).unwrap();
    assert_eq!(text.lines().count(), scene(2).unwrap().primitives.len());
}
