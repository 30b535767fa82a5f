use epiflow_core::geometry::{CameraView, EpipolarField};
use epiflow_core::refiner::{fuse_depth, initialize, redistribute_flows, Model};
use epiflow_core::synthdata::{generate, Scene, SceneSpec};
use epiflow_core::ModelConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(i: u64) -> Scene {
    generate(&SceneSpec::plane(i), i).unwrap()
}

fn field(s: &Scene, stride: usize) -> EpipolarField {
    let sources: Vec<&CameraView> = s.views[1..].iter().collect();
    EpipolarField::build(&s.views[0], &sources, stride).unwrap()
}

/// Flows at fraction `t` of each valid interval.
fn interior_flows(f: &EpipolarField, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = f.cells();
    (0..f.views * n)
        .map(|i| {
            let (lo, hi) = f.bounds(i / n, i % n);
            if f.is_valid(i / n, i % n) { lo + r.random_range(0.0..1.0) * (hi - lo) } else { 0.0 }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fused_depth_is_a_convex_combination(seed in 0u64..1000, spread in 0.1..20.0f64) {
        let s = scene(seed % 3);
        let f = field(&s, 8);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let flows = interior_flows(&f, &mut r);
        let logits: Vec<f64> = (0..flows.len()).map(|_| r.random_range(-spread..spread)).collect();
        let fused = fuse_depth(&f, &flows, &logits);
        let n = f.cells();
        for (c, d) in fused.iter().enumerate() {
            let per: Vec<f64> = (0..f.views).filter(|&v| f.is_valid(v, c)).map(|v| f.depth(v, c, flows[v * n + c])).collect();
            match d {
                None => prop_assert!(per.is_empty()),
                Some(d) => {
                    let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*d >= lo * (1.0 - 1e-12) && *d <= hi * (1.0 + 1e-12));
                }
            }
        }
    }
}

#[test]
fn dominant_logit_selects_its_view() {
    let s = scene(0);
    let f = field(&s, 8);
    let flows = interior_flows(&f, &mut ChaCha8Rng::seed_from_u64(1));
    let n = f.cells();
    let logits: Vec<f64> = (0..f.views * n).map(|i| if i / n == 1 { 1e3 } else { 0.0 }).collect();
    let fused = fuse_depth(&f, &flows, &logits);
    let mut checked = 0;
    for c in 0..n {
        if f.is_valid(1, c) {
            assert_eq!(fused[c], Some(f.depth(1, c, flows[n + c])));
            checked += 1;
        }
    }
    assert!(checked > n / 2);
}

#[test]
fn redistributed_flows_reproduce_the_depth() {
    let s = scene(1);
    let f = field(&s, 4);
    let n = f.cells();
    let gt = &s.gt.depths[0];
    // The ground truth at each cell centre lies inside every valid interval.
    let depth: Vec<f64> = (0..n)
        .map(|c| {
            let p = f.ref_pixel(c);
            gt.sample(p.u, p.v).unwrap_or(2.0)
        })
        .collect();
    let (flows, clamped) = redistribute_flows(&f, &depth);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..f.views * n).map(|_| r.random_range(-3.0..3.0)).collect();
    let fused = fuse_depth(&f, &flows, &logits);
    let mut agree = 0;
    for c in 0..n {
        let in_all = (0..f.views).all(|v| {
            let (lo, hi) = f.bounds(v, c);
            let e = flows[v * n + c];
            !f.is_valid(v, c) || (e > lo && e < hi)
        });
        if let (true, Some(d)) = (in_all, fused[c]) {
            assert!((d - depth[c]).abs() < 1e-9 * depth[c], "cell {c}: {d} vs {}", depth[c]);
            agree += 1;
        }
    }
    assert!(agree > n * 3 / 4, "{agree} of {n}, {clamped} clamped");
}

#[test]
fn out_of_range_depth_is_clamped_to_the_interval() {
    let s = scene(2);
    let f = field(&s, 8);
    let n = f.cells();
    let (flows, clamped) = redistribute_flows(&f, &vec![1e9; n]);
    assert!(clamped > 0);
    for i in 0..f.views * n {
        if f.is_valid(i / n, i % n) {
            let (lo, hi) = f.bounds(i / n, i % n);
            assert!(flows[i] >= lo && flows[i] <= hi);
        }
    }
}

#[test]
fn initialization_is_positive_and_starts_at_zero_flow() {
    for i in 0..3 {
        let s = scene(i);
        let f = field(&s, 8);
        let init = initialize(&f).unwrap();
        assert!(init.flows.iter().all(|&e| e == 0.0));
        assert!(init.scale > 0.0 && init.scale.is_finite());
        let mut count = 0;
        for (c, d) in init.depth.iter().enumerate() {
            if let Some(d) = d {
                assert!(*d > 0.0 && d.is_finite());
                count += 1;
            } else {
                assert!(!f.any_valid(c));
            }
        }
        assert!(count > f.cells() / 2);
    }
}

#[test]
fn initialization_scales_with_the_scene() {
    let a = generate(&SceneSpec::plane(0), 0).unwrap();
    let b = generate(&SceneSpec::plane(0).with_lambda(10.0), 0).unwrap();
    let (ia, ib) = (initialize(&field(&a, 8)).unwrap(), initialize(&field(&b, 8)).unwrap());
    assert!((ib.scale / ia.scale - 10.0).abs() < 1e-9);
    for (x, y) in ia.depth.iter().zip(&ib.depth) {
        if let (Some(x), Some(y)) = (x, y) {
            assert!((y / x - 10.0).abs() < 1e-9);
        }
    }
}

#[test]
fn coarse_only_schedule_returns_a_full_resolution_map() {
    let cfg = ModelConfig {
        coarse_iters: 2,
        fine_iters: 0,
        ..ModelConfig::desk()
    };
    let model = Model::<f32>::new(cfg).unwrap();
    let s = scene(0);
    let inf = model.run_inference(&s.views).unwrap();
    assert_eq!((inf.depth.width(), inf.depth.height()), (80, 64));
    assert_eq!(inf.iterations.len(), 2);
    assert!(inf.depth.valid_count() > 80 * 64 / 2);
    assert!(inf.depth.values().iter().all(|d| d.is_finite()));
}

#[test]
fn every_iteration_fuses_convexly() {
    let model = Model::<f64>::new(ModelConfig {
        coarse_iters: 2,
        fine_iters: 1,
        ..ModelConfig::desk()
    })
    .unwrap();
    let s = scene(1);
    let inf = model.run_inference(&s.views).unwrap();
    assert_eq!(inf.traces.len(), 3);
    assert_eq!(inf.iterations.len(), 3);
    for t in &inf.traces {
        let n = t.height * t.width;
        for c in 0..n {
            let views: Vec<usize> = (0..t.per_view.len() / n).filter(|v| t.per_view[v * n + c].is_some()).collect();
            let w: f64 = views.iter().map(|v| t.weights[v * n + c]).sum();
            match t.fused[c] {
                None => assert!(views.is_empty()),
                Some(d) => {
                    assert!((w - 1.0).abs() < 1e-9);
                    let per: Vec<f64> = views.iter().map(|v| t.per_view[v * n + c].unwrap()).collect();
                    let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert!(d >= lo * (1.0 - 1e-9) && d <= hi * (1.0 + 1e-9));
                }
            }
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let model = Model::<f32>::new(ModelConfig {
        coarse_iters: 2,
        fine_iters: 1,
        ..ModelConfig::desk()
    })
    .unwrap();
    let s = scene(2);
    let a = model.run_inference(&s.views).unwrap();
    let b = model.run_inference(&s.views).unwrap();
    assert_eq!(a, b);
}

#[test]
fn too_few_views_are_rejected() {
    let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let s = scene(0);
    assert!(model.run_inference(&s.views[..1]).is_err());
}
