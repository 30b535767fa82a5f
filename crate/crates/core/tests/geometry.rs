use epiflow_core::geometry::{
    depth_from_position, depth_to_flow, epipolar_setup, flow_to_depth, position_from_depth,
    relative_pose, triangulate, Branch, CameraView, Intrinsics, PixelPoint, Pose, RECT_INFLATION,
};
use epiflow_core::Error;
use nalgebra::{Matrix3, Matrix3x2, Rotation3, Vector3};
use proptest::prelude::*;

const W: usize = 80;
const H: usize = 64;

fn intrinsics(f: f64) -> Intrinsics {
    Intrinsics::new(f, f * 1.02, (W as f64 - 1.0) / 2.0 + 1.5, (H as f64 - 1.0) / 2.0 - 1.0).unwrap()
}

fn view(k: Intrinsics, pose: Pose) -> CameraView {
    CameraView::blank(k, pose, W, H).unwrap()
}

fn rotation(axis_angle: [f64; 3]) -> Matrix3<f64> {
    *Rotation3::from_scaled_axis(Vector3::from(axis_angle)).matrix()
}

/// Independent oracle: least-squares solve of `Ki^-1 p_s d_s - R K0^-1 p_r d_r = T`
/// for `(d_s, d_r)`.
fn oracle_depths(rel: &Pose, k0: &Intrinsics, ki: &Intrinsics, p_r: PixelPoint, p_s: PixelPoint) -> (f64, f64) {
    let ray_s = ki.matrix().try_inverse().unwrap() * Vector3::new(p_s.u, p_s.v, 1.0);
    let ray_r = rel.rotation() * k0.matrix().try_inverse().unwrap() * Vector3::new(p_r.u, p_r.v, 1.0);
    let a = Matrix3x2::from_columns(&[ray_s, -ray_r]);
    let sol = (a.transpose() * a).try_inverse().unwrap() * a.transpose() * rel.translation();
    (sol[1], sol[0])
}

fn warp_residual(rel: &Pose, k0: &Intrinsics, ki: &Intrinsics, p_r: PixelPoint, d_r: f64, p_s: PixelPoint, d_s: f64) -> f64 {
    let lhs = ki.matrix().try_inverse().unwrap() * Vector3::new(p_s.u, p_s.v, 1.0) * d_s;
    let rhs = rel.rotation() * (k0.matrix().try_inverse().unwrap() * Vector3::new(p_r.u, p_r.v, 1.0) * d_r)
        + rel.translation();
    (lhs - rhs).norm()
}

#[derive(Debug, Clone)]
struct Pair {
    reference: CameraView,
    source: CameraView,
    p_r: PixelPoint,
}

prop_compose! {
    fn camera_pair()(
        ref_axis in prop::array::uniform3(-0.3..0.3f64),
        ref_t in prop::array::uniform3(-1.0..1.0f64),
        src_axis in prop::array::uniform3(-0.35..0.35f64),
        dir in prop::array::uniform3(-1.0..1.0f64),
        baseline in 0.2..2.0f64,
        f0 in 50.0..150.0f64,
        fi in 50.0..150.0f64,
        u in 0.0..(W as f64 - 1.0),
        v in 0.0..(H as f64 - 1.0),
    ) -> Pair {
        let ref_pose = Pose::new(rotation(ref_axis), Vector3::from(ref_t)).unwrap();
        let mut t = Vector3::from(dir);
        if t.norm() < 1e-3 {
            t = Vector3::x();
        }
        let rel = Pose::new(rotation(src_axis), t.normalize() * baseline).unwrap();
        Pair {
            reference: view(intrinsics(f0), ref_pose),
            source: view(intrinsics(fi), rel.compose(&ref_pose)),
            p_r: PixelPoint::new(u, v),
        }
    }
}

fn rectified() -> (Pose, Intrinsics) {
    (
        Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap(),
    )
}

#[test]
fn relative_pose_of_identical_views_is_identity() {
    let a = view(intrinsics(80.0), Pose::new(rotation([0.1, -0.2, 0.3]), Vector3::new(1.0, 2.0, 3.0)).unwrap());
    let rel = relative_pose(&a, &a);
    assert!((rel.rotation() - Matrix3::identity()).amax() < 1e-12);
    assert!(rel.translation().amax() < 1e-12);
}

#[test]
fn relative_pose_from_identity_reference() {
    let a = view(intrinsics(80.0), Pose::identity());
    let b = view(intrinsics(80.0), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
    let rel = relative_pose(&a, &b);
    assert_eq!(*rel.rotation(), Matrix3::identity());
    assert_eq!(*rel.translation(), Vector3::new(1.0, 0.0, 0.0));
}

#[test]
fn rectified_warp() {
    let (rel, k) = rectified();
    let (p_s, d_s) = position_from_depth(&rel, &k, &k, PixelPoint::new(0.0, 0.0), 2.0).unwrap();
    assert_eq!((p_s.u, p_s.v, d_s), (0.5, 0.0, 2.0));
    let (d_r, d_s) = depth_from_position(&rel, &k, &k, PixelPoint::new(0.0, 0.0), p_s, Branch::X).unwrap();
    assert_eq!((d_r, d_s), (2.0, 2.0));
}

#[test]
fn pure_rotation_warp() {
    let k = intrinsics(90.0);
    let r = rotation([0.05, 0.2, -0.1]);
    let rel = Pose::new(r, Vector3::zeros()).unwrap();
    let p_r = PixelPoint::new(12.0, 50.0);
    let (p_s, d_s) = position_from_depth(&rel, &k, &k, p_r, 3.0).unwrap();
    let ray = r * k.unproject(p_r);
    let expect = k.project(&ray);
    assert!(p_s.distance(&expect) < 1e-12);
    assert!((d_s - 3.0 * ray.z).abs() < 1e-12);
}

#[test]
fn rectified_closed_form_over_grid() {
    // d_r = b f / (u' - u) for a rectified pair with baseline b along x.
    let k = Intrinsics::new(100.0, 100.0, 40.0, 30.0).unwrap();
    for &b in &[0.1, 0.5, 1.0, 3.0] {
        let rel = Pose::from_translation(Vector3::new(b, 0.0, 0.0));
        for u in (0..80).step_by(7) {
            for disparity in [0.5, 1.0, 4.0, 17.5, 60.0] {
                let p_r = PixelPoint::new(u as f64, 12.0);
                let p_s = PixelPoint::new(u as f64 + disparity, 12.0);
                let (d_r, d_s) = depth_from_position(&rel, &k, &k, p_r, p_s, Branch::X).unwrap();
                let expect = b * 100.0 / disparity;
                assert!((d_r - expect).abs() <= 1e-12 * expect, "{d_r} vs {expect}");
                assert!((d_s - expect).abs() <= 1e-12 * expect);
            }
        }
    }
}

#[test]
fn epipole_and_vanishing_point_are_degenerate() {
    let k = intrinsics(80.0);
    let rel = Pose::new(rotation([0.0, 0.1, 0.0]), Vector3::new(0.5, 0.1, 0.3)).unwrap();
    let p_r = PixelPoint::new(30.0, 20.0);
    let epipole = k.project(rel.translation());
    let vanishing = k.project(&(rel.rotation() * k.unproject(p_r)));
    for p_s in [epipole, vanishing] {
        let err = depth_from_position(&rel, &k, &k, p_r, p_s, Branch::X).unwrap_err();
        assert!(matches!(err, Error::DegenerateConfiguration(_)), "{err}");
    }
}

#[test]
fn zero_baseline_is_degenerate() {
    let a = view(intrinsics(80.0), Pose::identity());
    let b = view(intrinsics(80.0), Pose::new(rotation([0.0, 0.2, 0.0]), Vector3::zeros()).unwrap());
    assert!(matches!(
        epipolar_setup(&a, &b, PixelPoint::new(3.0, 4.0)),
        Err(Error::DegenerateConfiguration(_))
    ));
}

#[test]
fn rectified_setup_points_along_x() {
    let k = Intrinsics::new(50.0, 50.0, 0.0, 0.0).unwrap();
    let a = CameraView::blank(k, Pose::identity(), 100, 100).unwrap();
    let b = CameraView::blank(k, Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0)), 100, 100).unwrap();
    let p_r = PixelPoint::new(0.0, 0.0);
    let g = epipolar_setup(&a, &b, p_r).unwrap();
    assert!(g.e_dir.y.abs() < 1e-12 && (g.e_dir.x.abs() - 1.0).abs() < 1e-12);
    assert_eq!(g.branch, Branch::X);
    // With t_x = -1 the source point sits left of u (u' < u) at positive depth,
    // and depth grows towards u' -> u.
    let (lo, hi) = g.valid_interval;
    let left = g.position(lo).u.min(g.position(hi).u);
    let right = g.position(lo).u.max(g.position(hi).u);
    assert!((right - 0.0).abs() < 1e-9, "segment ends at the vanishing point");
    assert!((left - (-0.5 - RECT_INFLATION * 100.0)).abs() < 1e-9);
    assert!((g.base_point.u - 0.5 * (left + right)).abs() < 1e-9);
    assert!(g.depth_at(0.0) > 0.0);
}

#[test]
fn triangulate_rectified_point() {
    let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let a = CameraView::blank(k, Pose::identity(), 16, 16).unwrap();
    let b = CameraView::blank(k, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)), 16, 16).unwrap();
    let x = triangulate(&a, &b, PixelPoint::new(0.0, 0.0), PixelPoint::new(0.5, 0.0)).unwrap();
    assert!((x - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
}

#[test]
fn triangulate_behind_source_fails() {
    let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let a = CameraView::blank(k, Pose::identity(), 16, 16).unwrap();
    let b = CameraView::blank(k, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)), 16, 16).unwrap();
    // Negative disparity puts the intersection behind both cameras.
    let r = triangulate(&a, &b, PixelPoint::new(0.0, 0.0), PixelPoint::new(-0.5, 0.0));
    assert!(matches!(r, Err(Error::PointBehindCamera { .. })));
}

#[test]
fn pose_group_inverse() {
    let a = view(intrinsics(80.0), Pose::new(rotation([0.3, -0.1, 0.7]), Vector3::new(0.3, 1.0, -2.0)).unwrap());
    let b = view(intrinsics(70.0), Pose::new(rotation([-0.2, 0.5, 0.1]), Vector3::new(-1.0, 0.1, 0.4)).unwrap());
    let id = relative_pose(&a, &b).compose(&relative_pose(&b, &a));
    assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
    assert!(id.translation().amax() < 1e-12);
}

#[test]
fn look_at_faces_target() {
    let eye = Vector3::new(1.0, -2.0, -4.0);
    let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    let c = pose.apply(&Vector3::zeros());
    assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
    assert!((pose.center() - eye).norm() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn warp_residual_and_round_trip(pair in camera_pair(), d_r in 0.5..20.0f64) {
        let rel = relative_pose(&pair.reference, &pair.source);
        let (k0, ki) = (pair.reference.intrinsics, pair.source.intrinsics);
        let Ok((p_s, d_s)) = position_from_depth(&rel, &k0, &ki, pair.p_r, d_r) else {
            return Ok(());
        };
        prop_assert!(warp_residual(&rel, &k0, &ki, pair.p_r, d_r, p_s, d_s) < 1e-9);
        let (den, branch) = {
            let pr = rel.rotation() * k0.unproject(pair.p_r);
            let ps = ki.unproject(p_s);
            let den = [ps.x * pr.z - pr.x, ps.y * pr.z - pr.y];
            (den, if den[0].abs() >= den[1].abs() { Branch::X } else { Branch::Y })
        };
        prop_assume!(den[0].abs().max(den[1].abs()) > 1e-6);
        let (r, s) = depth_from_position(&rel, &k0, &ki, pair.p_r, p_s, branch).unwrap();
        prop_assert!((r - d_r).abs() < 1e-9 * d_r, "{r} vs {d_r}");
        prop_assert!((s - d_s).abs() < 1e-9 * d_s.abs());
        // Both branches agree whenever both are well conditioned.
        if den[0].abs() > 1e-6 && den[1].abs() > 1e-6 {
            let (rx, _) = depth_from_position(&rel, &k0, &ki, pair.p_r, p_s, Branch::X).unwrap();
            let (ry, _) = depth_from_position(&rel, &k0, &ki, pair.p_r, p_s, Branch::Y).unwrap();
            prop_assert!((rx - ry).abs() < 1e-9 * d_r.max(1.0) * 10.0, "{rx} vs {ry}");
        }
    }

    #[test]
    fn flow_depth_round_trip_and_monotonicity(pair in camera_pair(), frac in 0.0..1.0f64) {
        let Ok(g) = epipolar_setup(&pair.reference, &pair.source, pair.p_r) else {
            return Ok(());
        };
        prop_assert!((g.e_dir.norm() - 1.0).abs() < 1e-9);
        prop_assert_eq!(g.branch == Branch::X, g.e_dir.x.abs() >= g.e_dir.y.abs());
        let (lo, hi) = g.clamp_bounds();
        let e = lo + frac * (hi - lo);
        let (d, clamped) = flow_to_depth(&g, e);
        prop_assert!(!clamped && d > 0.0);
        let (back, _) = depth_to_flow(&g, d);
        let (d2, _) = flow_to_depth(&g, back);
        prop_assert!((d2 - d).abs() <= 1e-9 * d, "{d2} vs {d}");
        // Zero flow is the base point.
        let rel = relative_pose(&pair.reference, &pair.source);
        let (oracle_r, _) = oracle_depths(&rel, &pair.reference.intrinsics, &pair.source.intrinsics, pair.p_r, g.base_point);
        prop_assert!(oracle_r > 0.0);
        prop_assert!((g.depth_at(0.0) - oracle_r).abs() < 1e-6 * oracle_r.abs().max(1.0));
        // Strictly increasing depth on a dense sample of the interval.
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let x = lo + (hi - lo) * i as f64 / 999.0;
            let d = g.depth_at(x);
            prop_assert!(d > prev);
            prev = d;
        }
    }
}

/// Dense scan of the epipolar line over the inflated source rectangle, with
/// depths from the least-squares oracle.
fn scan(pair: &Pair) -> Option<(f64, f64, f64, f64)> {
    let g = epipolar_setup(&pair.reference, &pair.source, pair.p_r).ok()?;
    let rel = relative_pose(&pair.reference, &pair.source);
    let (w, h) = (W as f64, H as f64);
    let inside = |p: PixelPoint| {
        p.u >= -0.5 - RECT_INFLATION * w
            && p.u <= w - 0.5 + RECT_INFLATION * w
            && p.v >= -0.5 - RECT_INFLATION * h
            && p.v <= h - 0.5 + RECT_INFLATION * h
    };
    let reach = 2.0 * (w + h);
    let n = 10_000;
    let (mut first, mut last) = (None, None);
    let (lo, hi) = g.valid_interval;
    for i in 0..n {
        let e = -reach + 2.0 * reach * i as f64 / (n - 1) as f64;
        let p = g.position(e);
        if !inside(p) {
            continue;
        }
        let (d_r, d_s) = oracle_depths(&rel, &pair.reference.intrinsics, &pair.source.intrinsics, pair.p_r, p);
        let positive = d_r > 0.0 && d_s > 0.0;
        let margin = 1e-6 * (hi - lo);
        if e > lo + margin && e < hi - margin {
            assert!(positive, "inside sample {e} in ({lo}, {hi}) has d_r={d_r}, d_s={d_s}");
        } else if e < lo - margin || e > hi + margin {
            assert!(!positive, "outside sample {e} of ({lo}, {hi}) has d_r={d_r}, d_s={d_s}");
        }
        if positive {
            first.get_or_insert(e);
            last = Some(e);
        }
    }
    Some((first?, last?, lo, hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn valid_interval_matches_dense_scan(pair in camera_pair()) {
        if let Some((first, last, lo, hi)) = scan(&pair) {
            prop_assert!((first - lo).abs() < 0.5, "start {first} vs {lo}");
            prop_assert!((last - hi).abs() < 0.5, "end {last} vs {hi}");
        }
    }

    #[test]
    fn triangulated_point_reprojects(pair in camera_pair(), d_r in 0.5..20.0f64) {
        let rel = relative_pose(&pair.reference, &pair.source);
        let (k0, ki) = (pair.reference.intrinsics, pair.source.intrinsics);
        let Ok((p_s, _)) = position_from_depth(&rel, &k0, &ki, pair.p_r, d_r) else {
            return Ok(());
        };
        let Ok(x) = triangulate(&pair.reference, &pair.source, pair.p_r, p_s) else {
            return Ok(());
        };
        prop_assert!(k0.project(&x).distance(&pair.p_r) < 1e-6);
        prop_assert!(ki.project(&rel.apply(&x)).distance(&p_s) < 1e-6);
    }
}
