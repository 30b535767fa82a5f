use epiflow_core::geometry::{epipolar_setup, relative_pose, PixelPoint};
use epiflow_core::synthdata::{epipolar_oracle, generate, PrimitiveKind, SceneSpec};
use epiflow_core::Error;

fn fronto(radius: f64) -> SceneSpec {
    let mut spec = SceneSpec::default();
    spec.primitive = PrimitiveKind::Plane {
        tilt_deg: 0.0,
        tilt_axis_deg: 0.0,
    };
    spec.rig.elevation_deg = 0.0;
    spec.rig.radius = radius;
    spec
}

#[test]
fn fronto_parallel_plane_has_constant_depth() {
    let scene = generate(&fronto(2.0), 0).unwrap();
    let d = &scene.gt.depths[0];
    assert_eq!(d.valid_count(), d.width() * d.height());
    for &v in d.values() {
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn lambda_scales_depths_and_keeps_images() {
    let base = generate(&SceneSpec::plane(1), 3).unwrap();
    let big = generate(&SceneSpec::plane(1).with_lambda(10.0), 3).unwrap();
    for (a, b) in base.gt.depths.iter().zip(&big.gt.depths) {
        assert_eq!(a.mask(), b.mask());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - 10.0 * x).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }
    for (a, b) in base.views.iter().zip(&big.views) {
        let diff = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .filter(|(x, y)| (**x - **y).abs() > 1.5 / 255.0)
            .count();
        assert!(diff * 100 < a.image.data().len(), "{diff} channels differ");
    }
}

fn inverse_bilinear(d: &epiflow_core::raster::DepthMap, u: f64, v: f64) -> Option<f64> {
    let (x0, y0) = (u.floor(), v.floor());
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut acc = 0.0;
    for (dx, dy, w) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
        if x0 + dx >= d.width() || y0 + dy >= d.height() {
            return None;
        }
        acc += w / d.get(x0 + dx, y0 + dy)?;
    }
    Some(1.0 / acc)
}

#[test]
fn depth_maps_are_warp_consistent() {
    for spec in [SceneSpec::plane(0), SceneSpec::plane(2)] {
        let scene = generate(&spec, 11).unwrap();
        let (r, s) = (&scene.views[0], &scene.views[1]);
        let (dr, ds) = (&scene.gt.depths[0], &scene.gt.depths[1]);
        let mut checked = 0;
        for y in (0..dr.height()).step_by(3) {
            for x in (0..dr.width()).step_by(3) {
                let Some(d) = dr.get(x, y) else { continue };
                let world = r.backproject(PixelPoint::new(x as f64, y as f64), d);
                let Some((p, z)) = s.project(&world) else { continue };
                // Inverse depth is affine in pixel coordinates on a plane.
                if let Some(sampled) = inverse_bilinear(ds, p.u, p.v) {
                    assert!((sampled - z).abs() < 1e-6 * z, "{sampled} vs {z}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SceneSpec::plane(4);
    assert_eq!(generate(&spec, 9).unwrap(), generate(&spec, 9).unwrap());
    let other = generate(&spec, 10).unwrap();
    assert_ne!(generate(&spec, 9).unwrap().views[0].image, other.views[0].image);
}

#[test]
fn sphere_scene_renders() {
    let mut spec = SceneSpec::default();
    spec.primitive = PrimitiveKind::Sphere { radius: 6.0 };
    let scene = generate(&spec, 0).unwrap();
    assert_eq!(scene.views.len(), 3);
    assert!(!scene.gt.cloud.is_empty());
}

#[test]
fn low_coverage_is_reported() {
    let mut spec = SceneSpec::default();
    spec.primitive = PrimitiveKind::Sphere { radius: 0.3 };
    assert!(matches!(generate(&spec, 0), Err(Error::CoverageTooLow { .. })));
}

#[test]
fn oracle_agrees_with_closed_form() {
    let scene = generate(&SceneSpec::plane(1), 0).unwrap();
    for src in &scene.views[1..] {
        let rel = relative_pose(&scene.views[0], src);
        assert!(rel.translation().norm() > 0.1);
        for (u, v) in [(5.0, 5.0), (40.0, 31.0), (70.5, 60.0)] {
            let p = PixelPoint::new(u, v);
            let geom = epipolar_setup(&scene.views[0], src, p).unwrap();
            let (lo, hi) = geom.valid_interval;
            let table = epipolar_oracle(&scene.views[0], src, p, 400);
            let mut used = 0;
            for s in table.iter().filter(|s| s.d_r > 0.0 && s.d_s > 0.0) {
                let off = (s.position.u - geom.base_point.u, s.position.v - geom.base_point.v);
                let e = off.0 * geom.e_dir.x + off.1 * geom.e_dir.y;
                if e < lo + 1e-6 || e > hi - 1e-6 {
                    continue;
                }
                let d = geom.depth_at(e);
                assert!((d - s.d_r).abs() < 1e-9 * s.d_r.max(1.0), "{d} vs {}", s.d_r);
                assert!((geom.source_depth_at(e) - s.d_s).abs() < 1e-9 * s.d_s.max(1.0));
                used += 1;
            }
            assert!(used > 50, "{used}");
        }
    }
}
