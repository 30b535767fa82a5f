use epiflow_core::fusion::{evaluate, filter_depths, fuse_cloud, nearest_distances, EvalConfig, FilterConfig, KdTree, NeighborSearch, PointCloud};
use epiflow_core::raster::DepthMap;
use epiflow_core::synthdata::{generate, Scene, SceneSpec};
use epiflow_core::Error;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

fn scene() -> Scene {
    generate(&SceneSpec::plane(0), 0).unwrap()
}

#[test]
fn kd_tree_matches_brute_force_on_a_thousand_points() {
    let (q, r) = (cloud(1000, 1), cloud(1000, 2));
    assert_eq!(
        nearest_distances(&q, &r, NeighborSearch::KdTree),
        nearest_distances(&q, &r, NeighborSearch::BruteForce)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kd_tree_is_exact_on_random_clouds(n in 1usize..3000, m in 1usize..300, seed in 0u64..1000) {
        let (q, r) = (cloud(m, seed), cloud(n, seed + 1));
        prop_assert_eq!(
            nearest_distances(&q, &r, NeighborSearch::KdTree),
            nearest_distances(&q, &r, NeighborSearch::BruteForce)
        );
    }

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let (a, b) = (PointCloud::new(cloud(200, seed)), PointCloud::new(cloud(150, seed + 7)));
        let cfg = EvalConfig { tau: 0.1, ..EvalConfig::default() };
        let (ab, ba) = (evaluate(&a, &b, &cfg).unwrap(), evaluate(&b, &a, &cfg).unwrap());
        prop_assert_eq!(ab.acc, ba.comp);
        prop_assert_eq!(ab.comp, ba.acc);
        prop_assert!(ab.acc >= 0.0 && ab.comp >= 0.0 && (0.0..=1.0).contains(&ab.fscore));
    }
}

#[test]
fn kd_tree_on_duplicates_and_empty_input() {
    let pts = vec![Vector3::new(1.0, 1.0, 1.0); 20];
    let tree = KdTree::build(&pts);
    assert_eq!(tree.nearest_dist2(&Vector3::new(1.0, 1.0, 2.0)), Some(1.0));
    assert_eq!(KdTree::build(&[]).nearest_dist2(&Vector3::zeros()), None);
}

#[test]
fn identical_clouds_score_perfectly() {
    let a = PointCloud::new(cloud(500, 3));
    let m = evaluate(&a, &a, &EvalConfig::default()).unwrap();
    assert_eq!((m.acc, m.comp, m.overall, m.fscore), (0.0, 0.0, 0.0, 1.0));
}

#[test]
fn uniform_shift_below_tau_gives_its_length() {
    // A grid with spacing well above the shift keeps nearest neighbours paired.
    let pts: Vec<Vector3<f64>> = (0..1000)
        .map(|i| Vector3::new((i % 10) as f64, ((i / 10) % 10) as f64, (i / 100) as f64))
        .collect();
    let delta = Vector3::new(0.012, -0.009, 0.0);
    let shifted: Vec<Vector3<f64>> = pts.iter().map(|p| p + delta).collect();
    let m = evaluate(&PointCloud::new(shifted), &PointCloud::new(pts), &EvalConfig::default()).unwrap();
    assert!((m.acc - 0.015).abs() < 1e-12 && (m.comp - 0.015).abs() < 1e-12);
    assert_eq!(m.fscore, 1.0);
}

#[test]
fn distant_outliers_leave_accuracy_unchanged() {
    let gt = PointCloud::new(cloud(300, 4));
    let mut pred = PointCloud::new(cloud(300, 5));
    let cfg = EvalConfig::default();
    let before = evaluate(&pred, &gt, &cfg).unwrap();
    pred.points.push(Vector3::new(1e3, 0.0, 0.0));
    assert_eq!(evaluate(&pred, &gt, &cfg).unwrap().acc, before.acc);
    pred.points.push(gt.points[0]);
    assert!(evaluate(&pred, &gt, &cfg).unwrap().acc <= before.acc);
}

#[test]
fn empty_cloud_is_an_error() {
    let a = PointCloud::new(cloud(3, 6));
    assert!(matches!(evaluate(&PointCloud::default(), &a, &EvalConfig::default()), Err(Error::EmptyCloud)));
    assert!(matches!(evaluate(&a, &PointCloud::default(), &EvalConfig::default()), Err(Error::EmptyCloud)));
}

#[test]
fn perfect_depths_are_kept() {
    let s = scene();
    let masks = filter_depths(&s.gt.depths, &s.views, &FilterConfig::default()).unwrap();
    let covered: usize = s.gt.depths.iter().map(DepthMap::valid_count).sum();
    let kept: usize = masks.iter().flatten().filter(|&&k| k).count();
    // Pixels seen by fewer than two other views cannot be confirmed.
    let mut confirmable = 0;
    for (r, d) in s.gt.depths.iter().enumerate() {
        for y in 0..d.height() {
            for x in 0..d.width() {
                let Some(z) = d.get(x, y) else { continue };
                let p = s.views[r].backproject(epiflow_core::geometry::PixelPoint::new(x as f64, y as f64), z);
                let seen = (0..s.views.len())
                    .filter(|&j| j != r)
                    .filter(|&j| {
                        s.views[j].project(&p).is_some_and(|(q, _)| s.gt.depths[j].sample(q.u, q.v).is_some())
                    })
                    .count();
                confirmable += (seen >= 2) as usize;
            }
        }
    }
    assert!(kept as f64 >= 0.99 * confirmable as f64, "{kept} of {confirmable} ({covered} covered)");
}

#[test]
fn corrupted_view_is_rejected() {
    let s = scene();
    let mut depths = s.gt.depths.clone();
    depths[1] = depths[1].scaled(2.0);
    let masks = filter_depths(&depths, &s.views, &FilterConfig::default()).unwrap();
    assert_eq!(masks[1].iter().filter(|&&k| k).count(), 0);
    // With three views no other pixel keeps two supporters either.
    assert!(masks.iter().flatten().all(|&k| !k));
    let lenient = FilterConfig {
        min_views: 1,
        ..FilterConfig::default()
    };
    let masks = filter_depths(&depths, &s.views, &lenient).unwrap();
    assert_eq!(masks[1].iter().filter(|&&k| k).count(), 0);
    assert!(masks[0].iter().filter(|&&k| k).count() > 1000);
}

#[test]
fn single_view_keeps_nothing() {
    let s = scene();
    let masks = filter_depths(&s.gt.depths[..1], &s.views[..1], &FilterConfig::default()).unwrap();
    assert!(masks[0].iter().all(|&k| !k));
}

#[test]
fn fused_plane_points_lie_on_the_plane() {
    let s = scene();
    let masks = filter_depths(&s.gt.depths, &s.views, &FilterConfig::default()).unwrap();
    let cloud = fuse_cloud(&s.gt.depths, &masks, &s.views, 0.0).unwrap();
    assert_eq!(cloud.len(), masks.iter().flatten().filter(|&&k| k).count());
    assert!(cloud.len() > 1000);
    // Plane through the first three well-separated points.
    let (a, b, c) = (cloud.points[0], cloud.points[cloud.len() / 2], cloud.points[cloud.len() - 1]);
    let n = (b - a).cross(&(c - a)).normalize();
    let worst = cloud.points.iter().map(|p| (p - a).dot(&n).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
    assert_eq!(cloud.colors.as_ref().map(Vec::len), Some(cloud.len()));
}

#[test]
fn voxel_hashing_deduplicates() {
    let s = scene();
    let masks: Vec<Vec<bool>> = s.gt.depths.iter().map(|d| d.mask().to_vec()).collect();
    let all = fuse_cloud(&s.gt.depths, &masks, &s.views, 0.0).unwrap();
    let coarse = fuse_cloud(&s.gt.depths, &masks, &s.views, 0.2).unwrap();
    assert!(coarse.len() < all.len() && !coarse.is_empty());
    let empty: Vec<Vec<bool>> = masks.iter().map(|m| vec![false; m.len()]).collect();
    assert!(fuse_cloud(&s.gt.depths, &empty, &s.views, 0.0).unwrap().is_empty());
}
