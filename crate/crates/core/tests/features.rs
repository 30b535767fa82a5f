use epiflow_core::features::{build_lookup_pyramid, ContextNet, FeatureNet, COARSE_STRIDE, FINE_STRIDE};
use epiflow_core::ModelConfig;
use epiflow_tensor::{grad_check, Bound, GradCheckOptions, Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, h, w, 3], |_| r.random_range(0.0..1.0))
}

fn nets(cfg: &ModelConfig) -> (ParamSet<f64>, FeatureNet, ContextNet) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = FeatureNet::new(&mut params, cfg, &mut rng).unwrap();
    let c = ContextNet::new(&mut params, cfg, &mut rng).unwrap();
    (params, f, c)
}

#[test]
fn feature_shapes_follow_the_strides() {
    let cfg = ModelConfig::desk();
    let (params, net, ctx) = nets(&cfg);
    let g = Graph::new();
    let p = Bound::new(&g, &params);
    let x = g.constant(image(2, 64, 80, 1)).unwrap();
    let f = net.extract_features(&p, x).unwrap();
    assert_eq!(f.fine.shape(), [2, 64 / FINE_STRIDE, 80 / FINE_STRIDE, cfg.fine_channels]);
    assert_eq!(f.coarse.shape(), [2, 64 / COARSE_STRIDE, 80 / COARSE_STRIDE, cfg.coarse_channels]);
    let c = ctx.extract_context(&p, x.slice(0, 0, 1).unwrap()).unwrap();
    let half = cfg.context_channels / 2;
    assert_eq!(c.fine.hidden.shape(), [1, 16, 20, half]);
    assert_eq!(c.coarse.context.shape(), [1, 8, 10, half]);
    for v in c.fine.hidden.value().data().iter().chain(c.coarse.hidden.value().data()) {
        assert!(*v > -1.0 && *v < 1.0);
    }
}

#[test]
fn identical_images_give_identical_features() {
    let cfg = ModelConfig::desk();
    let (params, net, _) = nets(&cfg);
    let one = image(1, 32, 40, 2);
    let two = Tensor::from_fn(&[2, 32, 40, 3], |i| one.data()[i % one.len()]);
    let g = Graph::new();
    let p = Bound::new(&g, &params);
    let f = net.extract_features(&p, g.constant(two).unwrap()).unwrap();
    let c = f.coarse.value();
    let half = c.len() / 2;
    assert_eq!(c.data()[..half], c.data()[half..]);
}

#[test]
fn shared_weights_change_all_views_alike() {
    let cfg = ModelConfig::desk();
    let (mut params, net, _) = nets(&cfg);
    let imgs = image(2, 32, 40, 3);
    let run = |params: &ParamSet<f64>| {
        let g = Graph::new();
        let p = Bound::new(&g, params);
        let f = net.extract_features(&p, g.constant(imgs.clone()).unwrap()).unwrap();
        let v = f.fine.value().clone();
        v
    };
    let before = run(&params);
    let w = params.get_mut("features.conv2.weight").unwrap();
    let bumped = w.tensor.map(|x| x * 1.5);
    w.tensor = bumped;
    let after = run(&params);
    let half = before.len() / 2;
    let changed = |r: std::ops::Range<usize>| r.clone().any(|i| before.data()[i] != after.data()[i]);
    assert!(changed(0..half) && changed(half..before.len()));
    // Running each image alone reproduces the batched result exactly.
    let g = Graph::new();
    let p = Bound::new(&g, &params);
    let single = Tensor::from_fn(&[1, 32, 40, 3], |i| imgs.data()[imgs.len() / 2 + i]);
    let f = net.extract_features(&p, g.constant(single).unwrap()).unwrap();
    assert_eq!(f.fine.value().data(), &after.data()[half..]);
}

#[test]
fn translation_by_the_stride_shifts_features_by_one_cell() {
    let cfg = ModelConfig {
        instance_norm: false,
        ..ModelConfig::desk()
    };
    let (params, net, _) = nets(&cfg);
    let big = image(1, 64, 136, 5);
    let crop = |dx: usize| Tensor::from_fn(&[1, 64, 128, 3], |i| {
        let (y, x, c) = (i / (128 * 3), (i / 3) % 128, i % 3);
        big.data()[(y * 136 + x + dx) * 3 + c]
    });
    let run = |t: Tensor<f64>| {
        let g = Graph::new();
        let p = Bound::new(&g, &params);
        let v = net.extract_features(&p, g.constant(t).unwrap()).unwrap().coarse.value().clone();
        v
    };
    let (a, b) = (run(crop(0)), run(crop(COARSE_STRIDE)));
    let (h, w, c) = (8, 16, cfg.coarse_channels);
    let mut worst = 0.0f64;
    // The receptive field spans about three coarse cells on each side.
    for y in 3..h - 3 {
        for x in 3..w - 4 {
            for k in 0..c {
                let shifted = b.data()[(y * w + x) * c + k];
                let original = a.data()[(y * w + x + 1) * c + k];
                worst = worst.max((shifted - original).abs());
            }
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn pyramid_pools_by_two() {
    let g = Graph::<f64>::new();
    let flat = g.constant(Tensor::full(&[1, 8, 8, 2], 3.25)).unwrap();
    let levels = build_lookup_pyramid(flat, 4).unwrap();
    assert_eq!(levels.len(), 4);
    for (p, l) in levels.iter().enumerate() {
        assert_eq!(l.shape(), [1, 8 >> p, 8 >> p, 2]);
        assert!(l.value().data().iter().all(|&v| v == 3.25));
    }
    let small = g.constant(Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let levels = build_lookup_pyramid(small, 2).unwrap();
    assert_eq!(levels[1].value().data(), &[2.5]);

    // Mass conservation for power-of-two extents.
    let r = image(1, 16, 16, 6);
    let levels = build_lookup_pyramid(g.constant(r.clone()).unwrap(), 4).unwrap();
    let base: f64 = r.data().iter().sum();
    for (p, l) in levels.iter().enumerate() {
        let s: f64 = l.value().data().iter().sum::<f64>() * 4f64.powi(p as i32);
        assert!((s - base).abs() < 1e-9 * base.abs(), "level {p}: {s} vs {base}");
    }
}

#[test]
fn pyramid_extents_round_up() {
    let g = Graph::<f64>::new();
    let levels = build_lookup_pyramid(g.constant(Tensor::zeros(&[1, 8, 10, 1])).unwrap(), 4).unwrap();
    let shapes: Vec<_> = levels.iter().map(|l| (l.shape()[1], l.shape()[2])).collect();
    assert_eq!(shapes, [(8, 10), (4, 5), (2, 3), (1, 2)]);
}

#[test]
fn extractor_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let (params, net, ctx) = nets(&cfg);
    let opts = GradCheckOptions::default();
    let report = grad_check(
        |g, v| {
            let p = Bound::new(g, &params);
            let f = net.extract_features(&p, v[0]).unwrap();
            f.fine.square()?.mean_all()?.add(f.coarse.mean_all()?)
        },
        &[image(1, 16, 16, 7)],
        &opts,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
    let report = grad_check(
        |g, v| {
            let p = Bound::new(g, &params);
            let c = ctx.extract_context(&p, v[0]).unwrap();
            c.fine.hidden.sum_all()?.add(c.coarse.context.square()?.sum_all()?)
        },
        &[image(1, 16, 16, 8)],
        &opts,
    )
    .unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}
