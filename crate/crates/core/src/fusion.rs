//! Cross-view depth filtering, point-cloud fusion and cloud-to-cloud metrics.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraView, PixelPoint};
use crate::raster::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Forward-backward reprojection error bound in pixels.
    pub reprojection_px: f64,
    /// Relative depth disagreement bound.
    pub relative_depth: f64,
    /// Other views that must agree.
    pub min_views: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            reprojection_px: 1.0,
            relative_depth: 0.01,
            min_views: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Does view `j` confirm depth `d` at pixel `p` of view `r`?
fn consistent(r: &CameraView, j: &CameraView, dj: &DepthMap, p: PixelPoint, d: f64, cfg: &FilterConfig) -> bool {
    let x = r.backproject(p, d);
    let Some((q, _)) = j.project(&x) else { return false };
    let Some(dq) = dj.sample(q.u, q.v) else { return false };
    let y = j.backproject(q, dq);
    let Some((back, z)) = r.project(&y) else { return false };
    back.distance(&p) < cfg.reprojection_px && (z - d).abs() < cfg.relative_depth * d
}

/// Per view, per pixel: kept if at least `min_views` other views agree.
pub fn filter_depths(depths: &[DepthMap], views: &[CameraView], cfg: &FilterConfig) -> Result<Vec<Vec<bool>>> {
    if depths.len() != views.len() {
        return Err(invalid("one depth map per view is required"));
    }
    Ok((0..views.len())
        .map(|r| {
            let (dr, vr) = (&depths[r], &views[r]);
            (0..dr.height() * dr.width())
                .map(|i| {
                    let Some(d) = dr.get(i % dr.width(), i / dr.width()) else { return false };
                    let p = PixelPoint::new((i % dr.width()) as f64, (i / dr.width()) as f64);
                    let support = (0..views.len())
                        .filter(|&j| j != r)
                        .filter(|&j| consistent(vr, &views[j], &depths[j], p, d, cfg))
                        .count();
                    support >= cfg.min_views
                })
                .collect()
        })
        .collect())
}

/// Back-projects kept pixels. With `voxel > 0` only the first point per
/// voxel cell survives.
pub fn fuse_cloud(depths: &[DepthMap], masks: &[Vec<bool>], views: &[CameraView], voxel: f64) -> Result<PointCloud> {
    if depths.len() != views.len() || masks.len() != views.len() {
        return Err(invalid("depths, masks and views must align"));
    }
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for ((d, m), v) in depths.iter().zip(masks).zip(views) {
        for (i, &keep) in m.iter().enumerate() {
            let (x, y) = (i % d.width(), i / d.width());
            let Some(depth) = d.get(x, y).filter(|_| keep) else { continue };
            let p = v.backproject(PixelPoint::new(x as f64, y as f64), depth);
            if voxel > 0.0 {
                let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
                if !seen.insert(key) {
                    continue;
                }
            }
            points.push(p);
            let c = v.image.pixel(x.min(v.width - 1), y.min(v.height - 1));
            colors.push(c.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(PointCloud {
        points,
        colors: Some(colors),
    })
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

/// Static 3-d tree for exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices in implicit-tree order; node `[lo, hi)` splits at its
    /// middle element along `depth % 3`.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    fn split(points: &[Vector3<f64>], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (left, right) = idx.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    /// Squared distance to the nearest stored point, `None` when empty.
    pub fn nearest_dist2(&self, q: &Vector3<f64>) -> Option<f64> {
        if self.order.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.order[mid]];
        *best = best.min(dist2(q, p));
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborSearch {
    KdTree,
    BruteForce,
}

/// Distance from every query to its nearest reference point.
pub fn nearest_distances(queries: &[Vector3<f64>], reference: &[Vector3<f64>], mode: NeighborSearch) -> Vec<f64> {
    match mode {
        NeighborSearch::KdTree => {
            let tree = KdTree::build(reference);
            queries
                .iter()
                .map(|q| tree.nearest_dist2(q).unwrap_or(f64::INFINITY).sqrt())
                .collect()
        }
        NeighborSearch::BruteForce => queries
            .iter()
            .map(|q| reference.iter().map(|r| dist2(q, r)).fold(f64::INFINITY, f64::min).sqrt())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: f64,
    pub comp: f64,
    pub overall: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Distances above the cap are excluded from the means.
    pub outlier_cap: f64,
    pub tau: f64,
    pub search: NeighborSearch,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            outlier_cap: 20.0,
            tau: 0.05,
            search: NeighborSearch::KdTree,
        }
    }
}

/// Mean of the distances within the cap; the cap itself when none is.
fn capped_mean(d: &[f64], cap: f64) -> f64 {
    let kept: Vec<f64> = d.iter().copied().filter(|&x| x <= cap).collect();
    if kept.is_empty() {
        cap
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

pub fn evaluate(pred: &PointCloud, gt: &PointCloud, cfg: &EvalConfig) -> Result<MetricReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let to_gt = nearest_distances(&pred.points, &gt.points, cfg.search);
    let to_pred = nearest_distances(&gt.points, &pred.points, cfg.search);
    let acc = capped_mean(&to_gt, cfg.outlier_cap);
    let comp = capped_mean(&to_pred, cfg.outlier_cap);
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < cfg.tau).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(&to_gt), frac(&to_pred));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        acc,
        comp,
        overall: 0.5 * (acc + comp),
        precision,
        recall,
        fscore,
        tau: cfg.tau,
    })
}
