//! Epipolar geometry for every pixel of a reference grid and every source view.

use epiflow_tensor::{Real, Tensor};

use super::camera::{relative_pose, CameraView, Intrinsics, PixelPoint, Pose};
use super::epipolar::{epipolar_setup_raw, invert_clamped, EpipolarGeometry, LineDepth};
use crate::error::{degenerate, Result};

/// Extent of a grid downsampled by `stride` (rounding up).
pub fn level_extent(full: usize, stride: usize) -> usize {
    full.div_ceil(stride)
}

/// Full-resolution coordinate of the centre of cell `i` at `stride`.
pub fn level_to_full(i: f64, stride: usize) -> f64 {
    (i + 0.5) * stride as f64 - 0.5
}

/// Cell coordinate at `stride` of full-resolution coordinate `x`.
pub fn full_to_level(x: f64, stride: usize) -> f64 {
    (x + 0.5) / stride as f64 - 0.5
}

#[derive(Debug, Clone)]
pub struct EpipolarField {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub k0: Intrinsics,
    pub rel: Vec<Pose>,
    pub source_sizes: Vec<(usize, usize)>,
    entries: Vec<Option<EpipolarGeometry>>,
    /// Depth reported for degenerate entries.
    fallback: f64,
}

impl EpipolarField {
    /// Sets up every (view, cell) pair. Degenerate pairs are masked; the
    /// call fails only when no pair is usable.
    pub fn build(reference: &CameraView, sources: &[&CameraView], stride: usize) -> Result<Self> {
        let (h, w) = (
            level_extent(reference.height, stride),
            level_extent(reference.width, stride),
        );
        let rel: Vec<Pose> = sources.iter().map(|s| relative_pose(reference, s)).collect();
        let mut entries = Vec::with_capacity(sources.len() * h * w);
        for (src, rel) in sources.iter().zip(&rel) {
            for y in 0..h {
                for x in 0..w {
                    let p = PixelPoint::new(level_to_full(x as f64, stride), level_to_full(y as f64, stride));
                    entries.push(
                        epipolar_setup_raw(rel, &reference.intrinsics, &src.intrinsics, src.width, src.height, p)
                            .ok(),
                    );
                }
            }
        }
        if !entries.iter().any(Option::is_some) {
            return Err(degenerate("no source view provides a usable epipolar line"));
        }
        Ok(Self {
            views: sources.len(),
            height: h,
            width: w,
            stride,
            k0: reference.intrinsics,
            rel,
            source_sizes: sources.iter().map(|s| (s.width, s.height)).collect(),
            entries,
            fallback: 1.0,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn index(&self, view: usize, cell: usize) -> usize {
        view * self.cells() + cell
    }

    pub fn entry(&self, view: usize, cell: usize) -> Option<&EpipolarGeometry> {
        self.entries[self.index(view, cell)].as_ref()
    }

    pub fn is_valid(&self, view: usize, cell: usize) -> bool {
        self.entry(view, cell).is_some()
    }

    pub fn any_valid(&self, cell: usize) -> bool {
        (0..self.views).any(|v| self.is_valid(v, cell))
    }

    /// Full-resolution reference pixel of a cell.
    pub fn ref_pixel(&self, cell: usize) -> PixelPoint {
        PixelPoint::new(
            level_to_full((cell % self.width) as f64, self.stride),
            level_to_full((cell / self.width) as f64, self.stride),
        )
    }

    pub fn set_fallback_depth(&mut self, depth: f64) {
        self.fallback = depth;
    }

    pub fn fallback_depth(&self) -> f64 {
        self.fallback
    }

    /// Line coefficients; degenerate entries report the fallback depth.
    pub fn line(&self, view: usize, cell: usize) -> LineDepth {
        match self.entry(view, cell) {
            Some(g) => g.line,
            None => LineDepth {
                a: self.fallback,
                b: 0.0,
                c: 1.0,
                d: 0.0,
                n_s: self.fallback,
            },
        }
    }

    pub fn bounds(&self, view: usize, cell: usize) -> (f64, f64) {
        self.entry(view, cell).map_or((0.0, 0.0), EpipolarGeometry::clamp_bounds)
    }

    pub fn depth(&self, view: usize, cell: usize, e: f64) -> f64 {
        self.line(view, cell).depth(e)
    }

    /// Clamped flow reproducing `depth`; the flag reports clamping.
    pub fn flow_for_depth(&self, view: usize, cell: usize, depth: f64) -> (f64, bool) {
        match self.entry(view, cell) {
            Some(g) => {
                let (lo, hi) = g.clamp_bounds();
                invert_clamped(&g.line, lo, hi, depth)
            }
            None => (0.0, false),
        }
    }

    /// `[views, cells]` tensor of a per-entry quantity.
    pub fn tensor<T: Real>(&self, f: impl Fn(usize, usize) -> f64) -> Tensor<T> {
        let n = self.cells();
        Tensor::from_fn(&[self.views, n], |i| T::of(f(i / n, i % n)))
    }

    /// `[views, cells]` mask with 1 for usable entries.
    pub fn valid_mask<T: Real>(&self) -> Tensor<T> {
        self.tensor(|v, c| if self.is_valid(v, c) { 1.0 } else { 0.0 })
    }

    /// Coefficient tensors `(a, b, c, d)`, each `[views, cells]`.
    pub fn coefficients<T: Real>(&self) -> [Tensor<T>; 4] {
        [
            self.tensor(|v, c| self.line(v, c).a),
            self.tensor(|v, c| self.line(v, c).b),
            self.tensor(|v, c| self.line(v, c).c),
            self.tensor(|v, c| self.line(v, c).d),
        ]
    }

    /// Clamp bounds `(lo, hi)`, each `[views, cells]`.
    pub fn bound_tensors<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        (
            self.tensor(|v, c| self.bounds(v, c).0),
            self.tensor(|v, c| self.bounds(v, c).1),
        )
    }
}
