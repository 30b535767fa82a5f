//! Oracle, gradient and property checks runnable from the command line.
//!
//! Every check is deterministic: inputs come from fixed-seed generators and
//! reports print values in full precision, so two runs print the same bytes.

use std::fmt;

use epiflow_core::disparity::{estimate_uncertainty, flow_encoding, sample_cost_volume};
use epiflow_core::fusion::{evaluate, filter_depths, fuse_cloud, EvalConfig, FilterConfig, NeighborSearch, PointCloud};
use epiflow_core::geometry::{
    depth_from_position, depth_to_flow, epipolar_setup, flow_to_depth, level_extent, position_from_depth,
    relative_pose, Branch, CameraView, EpipolarField, Intrinsics, PixelPoint, Pose,
};
use epiflow_core::mda::{compute_pose_embedding, linear_attention_core, positional_encoding, softmax_attention_core, POSE_CHANNELS};
use epiflow_core::refiner::{initialize, Model};
use epiflow_core::synthdata::{epipolar_oracle, generate, SceneSpec};
use epiflow_core::training::depth_loss;
use epiflow_core::{ModelConfig, Result};
use epiflow_tensor::{grad_check, Bound, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error bound of the finite-difference checks.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

const W: usize = 80;
const H: usize = 64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn rotation(r: &mut ChaCha8Rng, max: f64) -> Matrix3<f64> {
    let axis = Vector3::from_fn(|_, _| r.random_range(-max..max));
    *Rotation3::from_scaled_axis(axis).matrix()
}

fn intrinsics(f: f64) -> Intrinsics {
    Intrinsics::new(f, f * 1.02, (W as f64 - 1.0) / 2.0 + 1.5, (H as f64 - 1.0) / 2.0 - 1.0).expect("positive focal")
}

struct Pair {
    reference: CameraView,
    source: CameraView,
    pixel: PixelPoint,
}

fn random_pair(r: &mut ChaCha8Rng) -> Pair {
    let ref_pose = Pose::new(rotation(r, 0.3), Vector3::from_fn(|_, _| r.random_range(-1.0..1.0))).expect("rotation");
    let rot = rotation(r, 0.35);
    let mut dir = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0));
    if dir.norm() < 1e-3 {
        dir = Vector3::x();
    }
    let rel = Pose::new(rot, dir.normalize() * r.random_range(0.2..2.0)).expect("rotation");
    let (f0, fi) = (r.random_range(50.0..150.0), r.random_range(50.0..150.0));
    Pair {
        reference: CameraView::blank(intrinsics(f0), ref_pose, W, H).expect("blank view"),
        source: CameraView::blank(intrinsics(fi), rel.compose(&ref_pose), W, H).expect("blank view"),
        pixel: PixelPoint::new(r.random_range(0.0..W as f64 - 1.0), r.random_range(0.0..H as f64 - 1.0)),
    }
}

/// `|K_i^-1 p_s d_s - (R K_0^-1 p_r d_r + T)|`.
fn warp_residual(rel: &Pose, k0: &Intrinsics, ki: &Intrinsics, p_r: PixelPoint, d_r: f64, p_s: PixelPoint, d_s: f64) -> f64 {
    let lhs = ki.unproject(p_s) * d_s;
    let rhs = rel.rotation() * (k0.unproject(p_r) * d_r) + rel.translation();
    (lhs - rhs).norm()
}

/// Warp residual, both round trips and the valid interval against the dense
/// scan, over `pairs` random camera pairs.
pub fn geometry_oracle(pairs: usize, seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let (mut residual, mut pos_rt, mut flow_rt, mut endpoint) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut warped, mut scanned, mut setups) = (0, 0, 0);
    for _ in 0..pairs {
        let pair = random_pair(&mut r);
        let d_r = r.random_range(0.5..20.0);
        let frac = r.random_range(0.0..1.0);
        let rel = relative_pose(&pair.reference, &pair.source);
        let (k0, ki) = (pair.reference.intrinsics, pair.source.intrinsics);
        if let Ok((p_s, d_s)) = position_from_depth(&rel, &k0, &ki, pair.pixel, d_r) {
            warped += 1;
            residual = residual.max(warp_residual(&rel, &k0, &ki, pair.pixel, d_r, p_s, d_s));
            let pr = rel.rotation() * k0.unproject(pair.pixel);
            let ps = ki.unproject(p_s);
            let den = [ps.x * pr.z - pr.x, ps.y * pr.z - pr.y];
            let branch = if den[0].abs() >= den[1].abs() { Branch::X } else { Branch::Y };
            if den[0].abs().max(den[1].abs()) > 1e-6 {
                if let Ok((back, _)) = depth_from_position(&rel, &k0, &ki, pair.pixel, p_s, branch) {
                    pos_rt = pos_rt.max((back - d_r).abs() / d_r);
                } else {
                    pos_rt = f64::INFINITY;
                }
            }
        }
        let Ok(g) = epipolar_setup(&pair.reference, &pair.source, pair.pixel) else {
            continue;
        };
        setups += 1;
        let (lo, hi) = g.clamp_bounds();
        let (d, _) = flow_to_depth(&g, lo + frac * (hi - lo));
        let (e, _) = depth_to_flow(&g, d);
        let (d2, _) = flow_to_depth(&g, e);
        flow_rt = flow_rt.max((d2 - d).abs() / d);

        let table = epipolar_oracle(&pair.reference, &pair.source, pair.pixel, 10_000);
        let along = |p: PixelPoint| (p.u - g.base_point.u) * g.e_dir.x + (p.v - g.base_point.v) * g.e_dir.y;
        let positive: Vec<f64> = table
            .iter()
            .filter(|s| s.d_r > 0.0 && s.d_s > 0.0)
            .map(|s| along(s.position))
            .collect();
        if positive.is_empty() {
            continue;
        }
        scanned += 1;
        let first = positive.iter().copied().fold(f64::INFINITY, f64::min);
        let last = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (s0, s1) = g.valid_interval;
        endpoint = endpoint.max((first - s0).abs()).max((last - s1).abs());
    }
    vec![
        Check::new(
            "geometry.warp_residual",
            residual < 1e-9 && warped > pairs / 2,
            format!("max {residual:e} over {warped} pairs"),
        ),
        Check::new(
            "geometry.depth_position_round_trip",
            pos_rt < 1e-9,
            format!("max relative {pos_rt:e}"),
        ),
        Check::new(
            "geometry.depth_flow_round_trip",
            flow_rt < 1e-9 && setups > pairs / 2,
            format!("max relative {flow_rt:e} over {setups} lines"),
        ),
        Check::new(
            "geometry.valid_interval_scan",
            endpoint < 0.5 && scanned > pairs / 2,
            format!("max endpoint gap {endpoint:e} px over {scanned} scans"),
        ),
    ]
}

/// `d_r = b f / (u' - u)` for rectified pairs over a parameter grid.
pub fn rectified_closed_form() -> Check {
    let k = Intrinsics::new(100.0, 100.0, 40.0, 30.0).expect("positive focal");
    let mut worst = 0.0f64;
    let mut count = 0;
    for &b in &[0.1, 0.5, 1.0, 3.0, 10.0] {
        let rel = Pose::from_translation(Vector3::new(b, 0.0, 0.0));
        for u in (0..80).step_by(7) {
            for v in [0.0, 12.0, 63.0] {
                for disparity in [0.5, 1.0, 4.0, 17.5, 60.0] {
                    let p_r = PixelPoint::new(u as f64, v);
                    let p_s = PixelPoint::new(u as f64 + disparity, v);
                    let expect = b * 100.0 / disparity;
                    let err = match depth_from_position(&rel, &k, &k, p_r, p_s, Branch::X) {
                        Ok((d_r, d_s)) => ((d_r - expect).abs().max((d_s - expect).abs())) / expect,
                        Err(_) => f64::INFINITY,
                    };
                    worst = worst.max(err);
                    count += 1;
                }
            }
        }
    }
    Check::new(
        "geometry.rectified_closed_form",
        worst <= 1e-12,
        format!("max relative {worst:e} over {count} cases"),
    )
}

fn grad_check_named<F>(name: &str, f: F, inputs: &[Tensor<f64>], eps: f64) -> Check
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> epiflow_tensor::Result<Var<'g, f64>>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    match grad_check(f, inputs, &opts) {
        Ok(GradCheckReport {
            max_rel_error, checked, ..
        }) => Check::new(
            name,
            checked > 0 && max_rel_error < GRAD_TOL,
            format!("max relative {max_rel_error:e} over {checked} elements"),
        ),
        Err(e) => Check::new(name, false, format!("error: {e}")),
    }
}

fn core_err(e: epiflow_core::Error) -> epiflow_tensor::TensorError {
    match e {
        epiflow_core::Error::Tensor(t) => t,
        other => epiflow_tensor::TensorError::ShapeMismatch {
            op: "core",
            detail: other.to_string(),
        },
    }
}

/// Small two-source scene and its coarse-level field.
fn small_field() -> Result<(Vec<CameraView>, EpipolarField)> {
    let mut spec = SceneSpec::plane(0);
    spec.width = 32;
    spec.height = 24;
    spec.focal = 32.0;
    let scene = generate(&spec, 3)?;
    let sources: Vec<&CameraView> = scene.views[1..].iter().collect();
    let field = EpipolarField::build(&scene.views[0], &sources, 8)?;
    Ok((scene.views, field))
}

/// Central finite differences of every learned operation at 64-bit.
pub fn gradient_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut r = rng(11);

    let x = random(&[1, 6, 7, 3], &mut r, -1.0, 1.0);
    let w = random(&[3, 3, 3, 4], &mut r, -1.0, 1.0);
    let b = random(&[4], &mut r, -1.0, 1.0);
    out.push(grad_check_named(
        "grad.conv_stride1",
        |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1),
        &[x.clone(), w.clone(), b.clone()],
        1e-6,
    ));
    out.push(grad_check_named(
        "grad.conv_stride2",
        |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1),
        &[x, w, b],
        1e-6,
    ));

    // Sample points kept off the integer lattice where the interpolant kinks.
    let feat = random(&[2, 6, 6, 3], &mut r, -1.0, 1.0);
    let pts = Tensor::from_fn(&[2, 10, 2], |_| r.random_range(0..5) as f64 + r.random_range(0.1..0.9));
    out.push(grad_check_named("grad.bilinear_sample", |_, v| v[0].bilinear_sample(v[1]), &[feat, pts], 1e-5));

    let (q, k, vv) = (
        random(&[2, 7, 4], &mut r, -1.0, 1.0),
        random(&[2, 7, 4], &mut r, -1.0, 1.0),
        random(&[2, 7, 4], &mut r, -1.0, 1.0),
    );
    out.push(grad_check_named(
        "grad.linear_attention",
        |_, v| linear_attention_core(v[0], v[1], v[2]).map_err(core_err),
        &[q.clone(), k.clone(), vv.clone()],
        1e-6,
    ));
    let bias = Tensor::from_fn(&[2, 1, 7], |i| if i % 5 == 3 { -1e4 } else { 0.0 });
    out.push(grad_check_named(
        "grad.softmax_attention",
        move |g, v| {
            let b = g.constant(bias.clone())?;
            softmax_attention_core(v[0], v[1], v[2], Some(b)).map_err(core_err)
        },
        &[q, k, vv],
        1e-6,
    ));

    let volume = random(&[2, 3, 4, 6], &mut r, -2.0, 2.0);
    out.push(grad_check_named(
        "grad.uncertainty",
        |_, v| estimate_uncertainty(v[0]).map_err(core_err),
        &[volume],
        1e-6,
    ));

    out.push(Check::from_result("grad.cost_volume", cost_volume_check(&mut r)));
    out.extend(module_checks(&mut r).unwrap_or_else(|e| vec![Check::new("grad.modules", false, format!("error: {e}"))]));

    let gt_vals: Vec<f64> = (0..20).map(|_| r.random_range(1.0..3.0)).collect();
    let mask: Vec<bool> = (0..20).map(|i| i % 7 != 2).collect();
    let gt = epiflow_core::raster::DepthMap::new(5, 4, gt_vals, mask).expect("consistent");
    out.push(grad_check_named(
        "grad.depth_loss",
        move |_, v| depth_loss(&[&[v[0], v[1]], &[v[2]]], &gt, 0.9, false).map_err(core_err),
        &[
            random(&[1, 4, 5, 1], &mut r, 1.0, 3.0),
            random(&[1, 4, 5, 1], &mut r, 1.0, 3.0),
            random(&[1, 4, 5, 1], &mut r, 1.0, 3.0),
        ],
        1e-6,
    ));
    out
}

fn cost_volume_check(r: &mut ChaCha8Rng) -> Result<Check> {
    let (_, field) = small_field()?;
    let init = initialize(&field)?;
    let (views, cells) = (field.views, field.cells());
    let levels = 2;
    let ch = 3;
    let reference = random(&[1, field.height, field.width, ch], r, -1.0, 1.0);
    let pyramid: Vec<Tensor<f64>> = (0..levels)
        .map(|l| {
            let s = field.stride << l;
            random(&[views, level_extent(24, s), level_extent(32, s), ch], r, -1.0, 1.0)
        })
        .collect();
    let flows = Tensor::from_fn(&[views, cells], |i| init.flows[i] + r.random_range(-3.0..3.0));
    let mut inputs = vec![reference, flows];
    inputs.extend(pyramid);
    Ok(grad_check_named(
        "grad.cost_volume",
        |_, v| sample_cost_volume(v[0], &v[2..], &field, v[1], 3).map_err(core_err),
        &inputs,
        1e-6,
    ))
}

/// Gradients through the learned modules with respect to their inputs.
fn module_checks(r: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let cfg = ModelConfig::tiny();
    let model = Model::<f64>::new(cfg.clone())?;
    let params = &model.params;
    let mut out = Vec::new();

    let images = random(&[2, 16, 16, 3], r, 0.0, 1.0);
    out.push(grad_check_named(
        "grad.feature_net",
        |g, v| {
            let p = Bound::new(g, params);
            let f = model.features().extract_features(&p, v[0]).map_err(core_err)?;
            f.fine.square()?.mean_all()?.add(f.coarse.mean_all()?)
        },
        &[images.clone()],
        1e-6,
    ));
    out.push(grad_check_named(
        "grad.context_net",
        |g, v| {
            let p = Bound::new(g, params);
            let c = model.context().extract_context(&p, v[0].slice(0, 0, 1)?).map_err(core_err)?;
            c.fine.hidden.mean_all()?.add(c.coarse.context.square()?.mean_all()?)
        },
        &[images],
        1e-6,
    ));

    let (v, h, w) = (2, 3, 4);
    let lm = cfg.cost_channels();
    out.push(grad_check_named(
        "grad.disparity_encoder",
        |g, x| {
            let p = Bound::new(g, params);
            let e = model.encoder().encode_disparity(&p, x[0], x[1], x[2], x[3]).map_err(core_err)?;
            e.feature.add(e.hidden.mean(3)?)
        },
        &[
            random(&[v, h, w, 1], r, 0.1, 0.9),
            random(&[v, h, w, cfg.hidden_channels], r, -1.0, 1.0),
            random(&[v, h, w, lm], r, -1.0, 1.0),
            random(&[v, h, w, 2], r, -1.0, 1.0),
        ],
        1e-6,
    ));

    let cells = h * w;
    let mask = Tensor::from_fn(&[cells, v], |i| if i % 5 == 1 { 0.0 } else { 1.0 });
    out.push(grad_check_named(
        "grad.mda",
        |g, x| {
            let p = Bound::new(g, params);
            let pe = g.constant(positional_encoding(h, w, cfg.posenc_bands))?;
            model.mda().mda_forward(&p, x[0], x[1], pe, Some(&mask)).map_err(core_err)
        },
        &[
            random(&[v, cells, cfg.disparity_channels], r, -1.0, 1.0),
            random(&[v, cells, POSE_CHANNELS], r, -1.0, 1.0),
        ],
        1e-6,
    ));

    let ch = cfg.gru_channels();
    let d = cfg.attention_dim;
    out.push(grad_check_named(
        "grad.gru_step",
        |g, x| {
            let p = Bound::new(g, params);
            model.update().gru().step(&p, x[0], x[1]).map_err(core_err)
        },
        &[
            random(&[1, h, w, ch], r, -1.0, 1.0),
            random(&[1, h, w, 2 * d + 4 + 1 + ch], r, -1.0, 1.0),
        ],
        1e-6,
    ));
    out.push(grad_check_named(
        "grad.update_heads",
        |g, x| {
            let p = Bound::new(g, params);
            let u = model.update().gru_step(&p, x[0], x[1], x[2], x[3], x[4]).map_err(core_err)?;
            u.delta.add(u.logits.square()?)
        },
        &[
            random(&[1, h, w, ch], r, -1.0, 1.0),
            random(&[v, cells, d], r, -1.0, 1.0),
            random(&[v, h, w, 2], r, -1.0, 1.0),
            random(&[1, h, w, 1], r, -1.0, 1.0),
            random(&[1, h, w, ch], r, -1.0, 1.0),
        ],
        1e-6,
    ));
    Ok(out)
}

/// `sum_j phi(q_i).phi(k_j) v_j / sum_j phi(q_i).phi(k_j)` with explicit
/// loops over all query/key pairs.
fn explicit_kernel_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let s = q.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let phi = |x: f64| x.max(0.0) + 1.0;
    let at = |t: &Tensor<f64>, bi: usize, i: usize, c: usize| t.data()[(bi * l + i) * d + c];
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        for i in 0..l {
            let mut den = 0.0;
            let mut num = vec![0.0; d];
            for j in 0..l {
                let sim: f64 = (0..d).map(|c| phi(at(q, bi, i, c)) * phi(at(k, bi, j, c))).sum();
                den += sim;
                for (c, n) in num.iter_mut().enumerate() {
                    *n += sim * at(v, bi, j, c);
                }
            }
            for c in 0..d {
                out[(bi * l + i) * d + c] = num[c] / den;
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Linear attention against the explicit kernel form, MDA view-permutation
/// equivariance, and permutation invariance of the fused depth.
pub fn attention_equivalence() -> Vec<Check> {
    let mut r = rng(23);
    let mut worst = 0.0f64;
    for l in [1, 2, 5, 16, 32] {
        let d = 1 + l % 7;
        let q = random(&[2, l, d], &mut r, -2.0, 2.0);
        let k = random(&[2, l, d], &mut r, -2.0, 2.0);
        let v = random(&[2, l, d], &mut r, -2.0, 2.0);
        let g = Graph::new();
        let fast = (|| -> Result<Vec<f64>> {
            let out = linear_attention_core(g.constant(q.clone())?, g.constant(k.clone())?, g.constant(v.clone())?)?;
            Ok(out.value().data().to_vec())
        })();
        worst = worst.max(match fast {
            Ok(f) => max_abs_diff(&f, &explicit_kernel_attention(&q, &k, &v)),
            Err(_) => f64::INFINITY,
        });
    }
    vec![
        Check::new(
            "attention.linear_equals_explicit",
            worst < 1e-6,
            format!("max abs {worst:e} for L up to 32"),
        ),
        Check::from_result("attention.mda_view_equivariance", mda_equivariance(&mut r)),
        Check::from_result("attention.fused_depth_invariance", fused_depth_invariance()),
    ]
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let row: usize = s[1..].iter().product();
    Tensor::from_fn(s, |i| t.data()[perm[i / row] * row + i % row])
}

fn mda_equivariance(r: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = ModelConfig::desk();
    let model = Model::<f64>::new(cfg.clone())?;
    let (v, h, w) = (4, 3, 5);
    let cells = h * w;
    let feats = random(&[v, cells, cfg.disparity_channels], r, -1.0, 1.0);
    let pose = random(&[v, cells, POSE_CHANNELS], r, -1.0, 1.0);
    let mask = Tensor::from_fn(&[cells, v], |i| if (i * 7) % 5 == 0 { 0.0 } else { 1.0 });
    let run = |f: &Tensor<f64>, p: &Tensor<f64>, m: &Tensor<f64>| -> Result<Tensor<f64>> {
        let g = Graph::new();
        let b = Bound::new(&g, &model.params);
        let pe = g.constant(positional_encoding(h, w, cfg.posenc_bands))?;
        let out = model.mda().mda_forward(&b, g.constant(f.clone())?, g.constant(p.clone())?, pe, Some(m))?;
        let value = out.value().clone();
        Ok(value)
    };
    let base = run(&feats, &pose, &mask)?;
    let mut worst = 0.0f64;
    for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
        let pm = Tensor::from_fn(&[cells, v], |i| mask.data()[(i / v) * v + perm[i % v]]);
        let out = run(&permute_rows(&feats, &perm), &permute_rows(&pose, &perm), &pm)?;
        worst = worst.max(max_abs_diff(out.data(), permute_rows(&base, &perm).data()));
    }
    Ok(Check::new(
        "attention.mda_view_equivariance",
        worst < 1e-6,
        format!("max abs {worst:e} over 3 permutations"),
    ))
}

fn fused_depth_invariance() -> Result<Check> {
    let mut spec = SceneSpec::plane(1);
    spec.rig.count = 4;
    let scene = generate(&spec, 5)?;
    let model = Model::<f64>::new(ModelConfig::desk())?;
    let run = |order: &[usize]| -> Result<Vec<f64>> {
        let views: Vec<CameraView> = order.iter().map(|&i| scene.views[i].clone()).collect();
        Ok(model.run_inference(&views)?.depth.values().to_vec())
    };
    let base = run(&[0, 1, 2, 3])?;
    let mut worst = 0.0f64;
    for order in [[0, 2, 1, 3], [0, 3, 1, 2]] {
        worst = worst.max(max_abs_diff(&run(&order)?, &base));
    }
    Ok(Check::new(
        "attention.fused_depth_invariance",
        worst < 1e-6,
        format!("max abs {worst:e} over 2 source orders"),
    ))
}

/// `U` stays inside `(0, 1)`, equals one half on constant volumes, and
/// orders by variance.
pub fn uncertainty_bounds() -> Vec<Check> {
    let mut r = rng(31);
    let u_of = |t: &Tensor<f64>| -> Result<Vec<f64>> {
        let g = Graph::new();
        let u = estimate_uncertainty(g.constant(t.clone())?)?.value().data().to_vec();
        Ok(u)
    };
    let mut inside = true;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut constant_ok = true;
    let mut ordered = true;
    for trial in 0..200 {
        let c = 1 + trial % 40;
        let spread = r.random_range(0.0..4.0);
        let t = random(&[2, 3, 3, c], &mut r, -spread - 1e-9, spread + 1e-9);
        match u_of(&t) {
            Ok(u) => {
                for x in u {
                    inside &= x > 0.0 && x < 1.0;
                    range = (range.0.min(x), range.1.max(x));
                }
            }
            Err(_) => inside = false,
        }
        let level = r.random_range(-10.0..10.0);
        let flat = Tensor::full(&[1, 2, 2, c], level);
        constant_ok &= u_of(&flat).map(|u| u.iter().all(|&x| x == 0.5)).unwrap_or(false);

        // Stretching a volume about its mean raises its variance.
        let base = random(&[1, 1, 1, c.max(2)], &mut r, -1.0, 1.0);
        let mean = base.data().iter().sum::<f64>() / base.data().len() as f64;
        let stretched = base.map(|x| mean + 1.5 * (x - mean));
        let (ub, us) = (u_of(&base), u_of(&stretched));
        let spread_base = base.data().iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        if spread_base > 1e-3 {
            ordered &= matches!((ub, us), (Ok(a), Ok(b)) if b[0] < a[0]);
        }
    }
    vec![
        Check::new(
            "uncertainty.open_unit_interval",
            inside,
            format!("observed range [{:e}, {:e}] over 200 fuzzed volumes", range.0, range.1),
        ),
        Check::new("uncertainty.constant_is_half", constant_ok, "exact 0.5 on 200 constant volumes".into()),
        Check::new("uncertainty.variance_ordering", ordered, "stretched volumes are more certain".into()),
    ]
}

/// Spatial index against brute force, perfect clouds, and fusion of
/// perfect depths onto the analytic plane.
pub fn fusion_metrics() -> Vec<Check> {
    let mut r = rng(41);
    let cloud = |r: &mut ChaCha8Rng, n: usize| {
        PointCloud::new((0..n).map(|_| Vector3::from_fn(|_, _| r.random_range(-1.0..1.0))).collect())
    };
    let (pred, gt) = (cloud(&mut r, 10_000), cloud(&mut r, 10_000));
    let kd = EvalConfig::default();
    let brute = EvalConfig {
        search: NeighborSearch::BruteForce,
        ..kd
    };
    let index = match (evaluate(&pred, &gt, &kd), evaluate(&pred, &gt, &brute)) {
        (Ok(a), Ok(b)) => Check::new(
            "fusion.kdtree_equals_brute_force",
            a == b,
            format!("acc {:e} / {:e}, comp {:e} / {:e}", a.acc, b.acc, a.comp, b.comp),
        ),
        _ => Check::new("fusion.kdtree_equals_brute_force", false, "evaluation failed".into()),
    };
    let same = match evaluate(&gt, &gt, &kd) {
        Ok(m) => Check::new(
            "fusion.identical_clouds",
            m.acc == 0.0 && m.comp == 0.0 && m.overall == 0.0 && m.fscore == 1.0,
            format!("acc {:e} comp {:e} fscore {:e}", m.acc, m.comp, m.fscore),
        ),
        Err(e) => Check::new("fusion.identical_clouds", false, format!("error: {e}")),
    };
    vec![index, same, Check::from_result("fusion.plane_residual", plane_residual())]
}

/// Least-squares plane through `points`: centroid and unit normal.
pub fn fit_plane(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    let eig = cov.symmetric_eigen();
    let (i, _) = eig.eigenvalues.argmin();
    (c, eig.eigenvectors.column(i).normalize())
}

fn plane_residual() -> Result<Check> {
    let scene = generate(&SceneSpec::plane(2), 9)?;
    let masks = filter_depths(&scene.gt.depths, &scene.views, &FilterConfig::default())?;
    let fused = fuse_cloud(&scene.gt.depths, &masks, &scene.views, 0.0)?;
    let (c, n) = fit_plane(&scene.gt.cloud);
    let close = fused.points.iter().filter(|p| n.dot(&(*p - c)).abs() < 1e-6).count();
    let frac = close as f64 / fused.len().max(1) as f64;
    let pixels: usize = scene.gt.depths.iter().map(|d| d.valid_count()).sum();
    Ok(Check::new(
        "fusion.plane_residual",
        !fused.is_empty() && frac >= 0.99,
        format!("{close} of {} fused points within 1e-6 ({} pixels in)", fused.len(), pixels),
    ))
}

/// Pose embedding and flow encoding respond identically to a global rescale
/// of the scene.
pub fn scale_invariance() -> Vec<Check> {
    let run = || -> Result<Check> {
        let mut worst = 0.0f64;
        let mut fields = Vec::new();
        for lambda in [0.1, 1.0, 10.0] {
            let scene = generate(&SceneSpec::plane(0).with_lambda(lambda), 2)?;
            let sources: Vec<&CameraView> = scene.views[1..].iter().collect();
            let field = EpipolarField::build(&scene.views[0], &sources, 8)?;
            let init = initialize(&field)?;
            let pose: Tensor<f64> = compute_pose_embedding(&field, &init.flows, init.scale, false);
            let enc: Tensor<f64> = flow_encoding(&field, &init.flows);
            fields.push((pose, enc));
        }
        for (p, e) in &fields[1..] {
            worst = worst.max(max_abs_diff(p.data(), fields[0].0.data()));
            worst = worst.max(max_abs_diff(e.data(), fields[0].1.data()));
        }
        Ok(Check::new(
            "scale.embedding_invariance",
            worst < 1e-6,
            format!("max abs {worst:e} across lambda 0.1, 1, 10"),
        ))
    };
    vec![Check::from_result("scale.embedding_invariance", run())]
}

/// Every family in a fixed order. `quick` trims the random-pair count.
pub fn run_all(quick: bool) -> Vec<Check> {
    let mut out = geometry_oracle(if quick { 100 } else { 1000 }, 1);
    out.push(rectified_closed_form());
    out.extend(gradient_suite());
    out.extend(attention_equivalence());
    out.extend(uncertainty_bounds());
    out.extend(fusion_metrics());
    out.extend(scale_invariance());
    out
}
