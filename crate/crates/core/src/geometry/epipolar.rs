//! One reference pixel's epipolar line in one source view.
//!
//! Along the line `p_s(e) = base + e * dir` both depths are linear-fractional
//! in the flow parameter `e`:
//!
//! ```text
//! d_r(e) = (a + b e) / (c + d e)        d_s(e) = n_s / (c + d e)
//! ```
//!
//! `dir` is oriented so that `d_r` increases with `e`.

use nalgebra::{Vector2, Vector3};

use super::camera::{relative_pose, Branch, CameraView, Intrinsics, PixelPoint, Pose};
use crate::error::{degenerate, Result};

/// The observable window is the source image inflated by this fraction of
/// its extent on every side.
pub const RECT_INFLATION: f64 = 0.25;
/// Relative translations shorter than this leave the line undefined.
pub const MIN_BASELINE: f64 = 1e-9;
/// Flows are clamped this far (pixels) inside the valid interval.
pub const CLAMP_MARGIN: f64 = 0.5;

/// Coefficients of the depth functions along a line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineDepth {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub n_s: f64,
}

impl LineDepth {
    pub fn depth(&self, e: f64) -> f64 {
        (self.a + self.b * e) / (self.c + self.d * e)
    }

    pub fn source_depth(&self, e: f64) -> f64 {
        self.n_s / (self.c + self.d * e)
    }

    /// Inverse of [`LineDepth::depth`].
    pub fn flow(&self, depth: f64) -> f64 {
        (self.a - self.c * depth) / (self.d * depth - self.b)
    }

    /// Re-expresses the coefficients for a parameter origin moved by `shift`.
    fn shifted(&self, shift: f64) -> LineDepth {
        LineDepth {
            a: self.a + self.b * shift,
            c: self.c + self.d * shift,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarGeometry {
    /// Unit direction of increasing reference depth.
    pub e_dir: Vector2<f64>,
    /// Midpoint of the valid segment.
    pub base_point: PixelPoint,
    /// `(s_min, s_max)` relative to `base_point`.
    pub valid_interval: (f64, f64),
    pub branch: Branch,
    pub line: LineDepth,
}

impl EpipolarGeometry {
    pub fn position(&self, e: f64) -> PixelPoint {
        PixelPoint::new(
            self.base_point.u + e * self.e_dir.x,
            self.base_point.v + e * self.e_dir.y,
        )
    }

    pub fn depth_at(&self, e: f64) -> f64 {
        self.line.depth(e)
    }

    pub fn source_depth_at(&self, e: f64) -> f64 {
        self.line.source_depth(e)
    }

    /// Bounds flows are clamped to: the valid interval shrunk by a margin.
    pub fn clamp_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.valid_interval;
        let m = CLAMP_MARGIN.min(0.25 * (hi - lo));
        (lo + m, hi - m)
    }

    /// Clamps a flow; the flag reports whether it moved.
    pub fn clamp(&self, e: f64) -> (f64, bool) {
        let (lo, hi) = self.clamp_bounds();
        if e.is_nan() {
            return (0.0, true);
        }
        let c = e.clamp(lo, hi);
        (c, c != e)
    }
}

/// Reference depth at flow `e`, clamping `e` first.
pub fn flow_to_depth(geom: &EpipolarGeometry, e: f64) -> (f64, bool) {
    let (e, clamped) = geom.clamp(e);
    (geom.depth_at(e), clamped)
}

/// Flow whose reference depth is `depth`, clamped to the valid interval.
pub fn depth_to_flow(geom: &EpipolarGeometry, depth: f64) -> (f64, bool) {
    let (lo, hi) = geom.clamp_bounds();
    invert_clamped(&geom.line, lo, hi, depth)
}

/// Monotone inversion with saturation at the clamp bounds.
pub(crate) fn invert_clamped(line: &LineDepth, lo: f64, hi: f64, depth: f64) -> (f64, bool) {
    if !(depth.is_finite() && depth > 0.0) {
        return (lo, true);
    }
    if depth <= line.depth(lo) {
        return (lo, true);
    }
    if depth >= line.depth(hi) {
        return (hi, true);
    }
    let e = line.flow(depth);
    let c = e.clamp(lo, hi);
    (c, c != e)
}

/// Parameter range where `s * (p + q e) > 0`, as `(lo, hi)` with infinities.
fn positive_range(p: f64, q: f64, s: f64) -> Option<(f64, f64)> {
    if q == 0.0 {
        return (s * p > 0.0).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let root = -p / q;
    if s * q > 0.0 {
        Some((root, f64::INFINITY))
    } else {
        Some((f64::NEG_INFINITY, root))
    }
}

/// Parameter range keeping `origin + e * dir` inside `[lo, hi]` on one axis.
fn slab(origin: f64, dir: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if dir.abs() < 1e-15 {
        return (origin >= lo && origin <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (t0, t1) = ((lo - origin) / dir, (hi - origin) / dir);
    Some((t0.min(t1), t0.max(t1)))
}

fn intersect(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0.max(b.0), a.1.min(b.1))
}

fn line_depth(
    rel: &Pose,
    ki: &Intrinsics,
    pr: &Vector3<f64>,
    origin: PixelPoint,
    dir: &Vector2<f64>,
    branch: Branch,
) -> LineDepth {
    let t = rel.translation();
    let (alpha, beta, t_axis, pr_axis) = match branch {
        Branch::X => ((origin.u - ki.cx) / ki.fx, dir.x / ki.fx, t.x, pr.x),
        Branch::Y => ((origin.v - ki.cy) / ki.fy, dir.y / ki.fy, t.y, pr.y),
    };
    LineDepth {
        a: t_axis - t.z * alpha,
        b: -t.z * beta,
        c: alpha * pr.z - pr_axis,
        d: beta * pr.z,
        n_s: t_axis * pr.z - t.z * pr_axis,
    }
}

/// Epipolar line of `p_r` in a source image of `width x height` pixels.
pub fn epipolar_setup_raw(
    rel: &Pose,
    k0: &Intrinsics,
    ki: &Intrinsics,
    width: usize,
    height: usize,
    p_r: PixelPoint,
) -> Result<EpipolarGeometry> {
    let t = rel.translation();
    if t.norm() <= MIN_BASELINE {
        return Err(degenerate("zero baseline between reference and source"));
    }
    let pr = rel.rotation() * k0.unproject(p_r);
    let k = ki.matrix();
    // Line through the epipole and the vanishing point of the reference ray.
    let l = (k * t).cross(&(k * pr));
    let normal = Vector2::new(l.x, l.y);
    let nn = normal.norm();
    if nn < 1e-12 * l.norm().max(1e-300) || nn == 0.0 {
        return Err(degenerate("reference ray passes through the source centre"));
    }
    let mut dir = Vector2::new(-l.y, l.x) / nn;
    let centre = Vector2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let off = (l.x * centre.x + l.y * centre.y + l.z) / (nn * nn);
    let origin = PixelPoint::new(centre.x - off * l.x, centre.y - off * l.y);
    let branch = if dir.x.abs() >= dir.y.abs() {
        Branch::X
    } else {
        Branch::Y
    };

    let mut line = line_depth(rel, ki, &pr, origin, &dir, branch);
    let orientation = line.b * line.c - line.a * line.d;
    if orientation.abs() < 1e-15 {
        return Err(degenerate("reference depth is constant along the epipolar line"));
    }
    if orientation < 0.0 {
        dir = -dir;
        line = line_depth(rel, ki, &pr, origin, &dir, branch);
    }
    if line.n_s == 0.0 {
        return Err(degenerate("source depth vanishes along the epipolar line"));
    }
    let s = line.n_s.signum();

    let positive = match (
        positive_range(line.c, line.d, s),
        positive_range(line.a, line.b, s),
    ) {
        (Some(x), Some(y)) => intersect(x, y),
        _ => return Err(degenerate("no depth-positive segment on the epipolar line")),
    };
    let (w, h) = (width as f64, height as f64);
    let rect_x = slab(origin.u, dir.x, -0.5 - RECT_INFLATION * w, w - 0.5 + RECT_INFLATION * w);
    let rect_y = slab(origin.v, dir.y, -0.5 - RECT_INFLATION * h, h - 0.5 + RECT_INFLATION * h);
    let (lo, hi) = match (rect_x, rect_y) {
        (Some(x), Some(y)) => intersect(positive, intersect(x, y)),
        _ => return Err(degenerate("epipolar line misses the source image")),
    };
    if !(hi - lo > 1.0) {
        return Err(degenerate("depth-positive segment is not observable in the source"));
    }
    let mid = 0.5 * (lo + hi);
    Ok(EpipolarGeometry {
        e_dir: dir,
        base_point: PixelPoint::new(origin.u + mid * dir.x, origin.v + mid * dir.y),
        valid_interval: (lo - mid, hi - mid),
        branch,
        line: line.shifted(mid),
    })
}

/// Epipolar line of reference pixel `p_r` in `source`.
pub fn epipolar_setup(reference: &CameraView, source: &CameraView, p_r: PixelPoint) -> Result<EpipolarGeometry> {
    let rel = relative_pose(reference, source);
    epipolar_setup_raw(
        &rel,
        &reference.intrinsics,
        &source.intrinsics,
        source.width,
        source.height,
        p_r,
    )
}
