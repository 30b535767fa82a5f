use std::f64::consts::PI;

use epiflow_core::geometry::{CameraView, EpipolarField, Intrinsics, Pose};
use epiflow_core::mda::{
    compute_pose_embedding, linear_attention_core, pose_distance, positional_encoding, ray_angle, Mda, POSE_CHANNELS,
};
use epiflow_core::refiner::initialize;
use epiflow_core::synthdata::{generate, SceneSpec};
use epiflow_core::{Error, ModelConfig};
use epiflow_tensor::{grad_check, Bound, GradCheckOptions, Graph, ParamSet, Tensor};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn k() -> Intrinsics {
    Intrinsics::new(80.0, 80.0, 39.5, 31.5).unwrap()
}

#[test]
fn pose_distance_examples() {
    assert_eq!(pose_distance(&Pose::identity(), false), 0.0);
    let t4 = Pose::from_translation(Vector3::new(0.0, 4.0, 0.0));
    assert_eq!(pose_distance(&t4, false), 2.0);
    assert_eq!(pose_distance(&t4, true), 4.0);
    let flip = Pose::new(*Rotation3::from_axis_angle(&Vector3::z_axis(), PI).matrix(), Vector3::zeros()).unwrap();
    assert!((pose_distance(&flip, false) - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((pose_distance(&flip, false) - 1.63299).abs() < 1e-5);
}

#[test]
fn ray_angle_examples() {
    let a = CameraView::blank(k(), Pose::identity(), 80, 64).unwrap();
    let b = CameraView::blank(k(), Pose::from_translation(Vector3::new(-2.0, 0.0, 0.0)), 80, 64).unwrap();
    let x = Vector3::new(1.0, 0.0, 1.0);
    assert!((ray_angle(&a, &b, &x).unwrap() - PI / 2.0).abs() < 1e-15);
    assert!((ray_angle(&a, &b, &x).unwrap() - 2.0 * 1f64.atan()).abs() < 1e-15);
    assert_eq!(ray_angle(&b, &a, &x).unwrap(), ray_angle(&a, &b, &x).unwrap());
    assert_eq!(ray_angle(&a, &a, &x).unwrap(), 0.0);
    assert!(matches!(
        ray_angle(&a, &b, &Vector3::new(1.0, 0.0, -1.0)),
        Err(Error::PointBehindCamera { .. })
    ));
}

#[test]
fn rectified_embedding_matches_hand_values() {
    let b = 0.5;
    let reference = CameraView::blank(k(), Pose::identity(), 80, 64).unwrap();
    let source = CameraView::blank(k(), Pose::from_translation(Vector3::new(-b, 0.0, 0.0)), 80, 64).unwrap();
    let field = EpipolarField::build(&reference, &[&source], 8).unwrap();
    let d = 3.0;
    let n = field.cells();
    let flows: Vec<f64> = (0..n).map(|c| field.flow_for_depth(0, c, d).0).collect();
    let emb: Tensor<f64> = compute_pose_embedding(&field, &flows, 1.0, false);
    let c = n / 2 + 3;
    assert!(field.is_valid(0, c));
    let row = &emb.data()[c * POSE_CHANNELS..(c + 1) * POSE_CHANNELS];
    let p = field.ref_pixel(c);
    let x = k().unproject(p) * d;
    let to_src = x - Vector3::new(b, 0.0, 0.0);
    let theta = (x.dot(&to_src) / (x.norm() * to_src.norm())).acos();
    assert!((row[0] - theta).abs() < 1e-6, "{} vs {theta}", row[0]);
    assert!((row[1] - b.sqrt()).abs() < 1e-12);
    assert!((row[4] - d.ln()).abs() < 1e-6);
    assert!((row[5] - d.ln()).abs() < 1e-6);
    let p_s = k().project(&to_src);
    assert!((row[2] - (2.0 * (p_s.u + 0.5) / 80.0 - 1.0)).abs() < 1e-6);
    assert!((row[3] - (2.0 * (p_s.v + 0.5) / 64.0 - 1.0)).abs() < 1e-6);
    for (got, want) in row[6..9].iter().zip(x.normalize().iter()) {
        assert!((got - want).abs() < 1e-9);
    }
    for (got, want) in row[9..12].iter().zip(to_src.normalize().iter()) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn duplicate_sources_embed_identically() {
    let scene = generate(&SceneSpec::plane(0), 0).unwrap();
    let s = &scene.views[1];
    let field = EpipolarField::build(&scene.views[0], &[s, &scene.views[2], s], 8).unwrap();
    let init = initialize(&field).unwrap();
    let emb: Tensor<f64> = compute_pose_embedding(&field, &init.flows, init.scale, false);
    let per = field.cells() * POSE_CHANNELS;
    assert_eq!(emb.data()[..per], emb.data()[2 * per..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embedding_ranges(seed in 0u64..50, frac in 0.0..1.0f64) {
        let scene = generate(&SceneSpec::plane(seed % 3), seed).unwrap();
        let sources: Vec<&CameraView> = scene.views[1..].iter().collect();
        let field = EpipolarField::build(&scene.views[0], &sources, 8).unwrap();
        let init = initialize(&field).unwrap();
        let n = field.cells();
        let flows: Vec<f64> = (0..field.views * n)
            .map(|i| {
                let (lo, hi) = field.bounds(i / n, i % n);
                if field.is_valid(i / n, i % n) { lo + frac * (hi - lo) } else { 0.0 }
            })
            .collect();
        let emb: Tensor<f64> = compute_pose_embedding(&field, &flows, init.scale, false);
        for i in 0..field.views * n {
            if !field.is_valid(i / n, i % n) {
                continue;
            }
            let row = &emb.data()[i * POSE_CHANNELS..(i + 1) * POSE_CHANNELS];
            prop_assert!(row.iter().all(|x| x.is_finite()));
            prop_assert!(row[0] >= 0.0 && row[0] <= PI);
            prop_assert!(row[1] >= 0.0);
            let r0 = Vector3::new(row[6], row[7], row[8]).norm();
            let ri = Vector3::new(row[9], row[10], row[11]).norm();
            prop_assert!((r0 - 1.0).abs() < 1e-6 && (ri - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn positional_encoding_values() {
    let pe: Tensor<f64> = positional_encoding(4, 5, 2);
    assert_eq!(pe.shape(), [1, 20, 8]);
    assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    // Cell (x=1, y=2), band 1.
    let row = &pe.data()[(2 * 5 + 1) * 8..(2 * 5 + 2) * 8];
    assert!((row[4] - (2.0 * PI / 5.0).sin()).abs() < 1e-15);
    assert!((row[5] - (2.0 * PI / 5.0).cos()).abs() < 1e-15);
    assert!((row[6] - (2.0 * PI * 2.0 / 4.0).sin()).abs() < 1e-15);
    assert!((row[7] - (2.0 * PI * 2.0 / 4.0).cos()).abs() < 1e-15);
}

fn linear_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let out = linear_attention_core(g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap())
        .unwrap()
        .value()
        .clone();
    out
}

/// Quadratic form: weights `phi(q_i).phi(k_j)` normalised per row.
fn explicit(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let s = q.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { 1.0 };
    let at = |t: &Tensor<f64>, bi, i, c| t.data()[(bi * l + i) * d + c];
    let mut out = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for i in 0..l {
            let w: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| phi(at(q, bi, i, c)) * phi(at(k, bi, j, c))).sum())
                .collect();
            let total: f64 = w.iter().sum();
            for c in 0..d {
                out.push((0..l).map(|j| w[j] * at(v, bi, j, c)).sum::<f64>() / total);
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn linear_attention_equals_the_quadratic_form(l in 1usize..=32, d in 1usize..6, seed in 0u64..1000) {
        let (q, k, v) = (random(&[2, l, d], seed, -2.0, 2.0), random(&[2, l, d], seed + 1, -2.0, 2.0), random(&[2, l, d], seed + 2, -2.0, 2.0));
        let fast = linear_attention(&q, &k, &v);
        let slow = explicit(&q, &k, &v);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        // Rows are convex combinations of the value rows.
        for bi in 0..2 {
            for c in 0..d {
                let col: Vec<f64> = (0..l).map(|j| v.data()[(bi * l + j) * d + c]).collect();
                let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                for i in 0..l {
                    let o = fast.data()[(bi * l + i) * d + c];
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_token_returns_its_value() {
    let (q, k, v) = (random(&[1, 1, 4], 1, -1.0, 1.0), random(&[1, 1, 4], 2, -1.0, 1.0), random(&[1, 1, 4], 3, -1.0, 1.0));
    for (a, b) in linear_attention(&q, &k, &v).data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn equal_tokens_give_equal_outputs() {
    let cfg = ModelConfig::desk();
    let (params, mda) = module(&cfg);
    let g = Graph::new();
    let p = Bound::new(&g, &params);
    let token = random(&[1, 1, cfg.attention_dim], 5, -1.0, 1.0);
    let x = Tensor::from_fn(&[2, 6, cfg.attention_dim], |i| token.data()[i % cfg.attention_dim]);
    let out = mda.blocks()[0].linear_self_attention(&p, g.constant(x).unwrap()).unwrap().value().clone();
    let d = cfg.attention_dim;
    for t in 1..12 {
        assert_eq!(out.data()[t * d..(t + 1) * d], out.data()[..d]);
    }
}

fn module(cfg: &ModelConfig) -> (ParamSet<f64>, Mda) {
    let mut params = ParamSet::new();
    let mda = Mda::new(&mut params, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (params, mda)
}

#[test]
fn one_view_cross_attention_ignores_queries_and_keys() {
    let cfg = ModelConfig::desk();
    let (mut params, mda) = module(&cfg);
    let x = random(&[10, 1, cfg.attention_dim], 3, -1.0, 1.0);
    let run = |params: &ParamSet<f64>| {
        let g = Graph::new();
        let p = Bound::new(&g, params);
        let out = mda.blocks()[0].cross_view_attention(&p, g.constant(x.clone()).unwrap(), None).unwrap().value().clone();
        out
    };
    let before = run(&params);
    for name in ["mda.block0.cross.q.weight", "mda.block0.cross.k.weight"] {
        let w = params.get_mut(name).unwrap();
        w.tensor = w.tensor.map(|v| v * -3.0 + 0.1);
    }
    assert_eq!(run(&params), before);
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let row: usize = s[1..].iter().product();
    Tensor::from_fn(s, |i| t.data()[perm[i / row] * row + i % row])
}

fn mda_run(mda: &Mda, params: &ParamSet<f64>, cfg: &ModelConfig, f: &Tensor<f64>, pose: &Tensor<f64>, mask: &Tensor<f64>, hw: (usize, usize)) -> Tensor<f64> {
    let g = Graph::new();
    let p = Bound::new(&g, params);
    let pe = g.constant(positional_encoding(hw.0, hw.1, cfg.posenc_bands)).unwrap();
    let out = mda
        .mda_forward(&p, g.constant(f.clone()).unwrap(), g.constant(pose.clone()).unwrap(), pe, Some(mask))
        .unwrap()
        .value()
        .clone();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mda_is_view_permutation_equivariant(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let cfg = ModelConfig::desk();
        let (params, mda) = module(&cfg);
        let (v, h, w) = (3, 2, 4);
        let cells = h * w;
        let f = random(&[v, cells, cfg.disparity_channels], seed, -1.0, 1.0);
        let pose = random(&[v, cells, POSE_CHANNELS], seed + 1, -1.0, 1.0);
        let mask = Tensor::from_fn(&[cells, v], |i| if (i as u64 + seed) % 4 == 0 { 0.0 } else { 1.0 });
        let base = mda_run(&mda, &params, &cfg, &f, &pose, &mask, (h, w));
        let pm = Tensor::from_fn(&[cells, v], |i| mask.data()[(i / v) * v + perm[i % v]]);
        let out = mda_run(&mda, &params, &cfg, &permute_rows(&f, &perm), &permute_rows(&pose, &perm), &pm, (h, w));
        let expect = permute_rows(&base, &perm);
        for (a, b) in out.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn large_inputs_stay_finite() {
    let cfg = ModelConfig::desk();
    let (params, mda) = module(&cfg);
    let (v, h, w) = (2, 3, 3);
    let f = random(&[v, 9, cfg.disparity_channels], 1, -1e3, 1e3);
    let pose = random(&[v, 9, POSE_CHANNELS], 2, -1e3, 1e3);
    let mask = Tensor::full(&[9, v], 1.0);
    let out = mda_run(&mda, &params, &cfg, &f, &pose, &mask, (h, w));
    assert!(out.data().iter().all(|x| x.is_finite()));
}

#[test]
fn disabled_pose_embedding_contributes_nothing() {
    let cfg = ModelConfig {
        use_pose_embedding: false,
        ..ModelConfig::desk()
    };
    let (params, mda) = module(&cfg);
    let f = random(&[2, 6, cfg.disparity_channels], 1, -1.0, 1.0);
    let mask = Tensor::full(&[6, 2], 1.0);
    let a = mda_run(&mda, &params, &cfg, &f, &random(&[2, 6, POSE_CHANNELS], 2, -1.0, 1.0), &mask, (2, 3));
    let b = mda_run(&mda, &params, &cfg, &f, &random(&[2, 6, POSE_CHANNELS], 3, -1.0, 1.0), &mask, (2, 3));
    assert_eq!(a, b);
}

#[test]
fn projection_and_attention_gradients() {
    let cfg = ModelConfig::tiny();
    let (params, mda) = module(&cfg);
    let opts = GradCheckOptions::default();
    let report = grad_check(
        |g, x| {
            let p = Bound::new(g, &params);
            Ok(mda.project_pose(&p, x[0]).unwrap())
        },
        &[random(&[2, 5, POSE_CHANNELS], 1, -1.0, 1.0)],
        &opts,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
    let mask = Tensor::from_fn(&[6, 3], |i| if i == 4 { 0.0 } else { 1.0 });
    let report = grad_check(
        |g, x| {
            let p = Bound::new(g, &params);
            let b = &mda.blocks()[0];
            let y = b.linear_self_attention(&p, x[0]).unwrap();
            Ok(b.cross_view_attention(&p, y.permute(&[1, 0, 2])?, Some(&mask)).unwrap())
        },
        &[random(&[3, 6, cfg.attention_dim], 2, -1.0, 1.0)],
        &opts,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn rotation_sanity() {
    // The relative pose of a rotated pair feeds the distance through its trace.
    let r = *Rotation3::from_axis_angle(&Vector3::y_axis(), 0.3).matrix();
    let pose = Pose::new(r, Vector3::zeros()).unwrap();
    let expect = (2.0 / 3.0 * (3.0 - r.trace())).sqrt();
    assert!((pose_distance(&pose, false) - expect).abs() < 1e-15);
}
