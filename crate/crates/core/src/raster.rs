//! Plain row-major images and depth maps.

use crate::error::{invalid, Result};

/// RGB image, values in `[0, 1]`, row-major `height x width x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid(format!(
                "image buffer of {} values for {width}x{height}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantises to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Per-pixel depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || mask.len() != values.len() {
            return Err(invalid(format!(
                "depth map buffers {}/{} for {width}x{height}",
                values.len(),
                mask.len()
            )));
        }
        for (v, &m) in values.iter().zip(&mask) {
            if m && !(v.is_finite() && *v > 0.0) {
                return Err(invalid(format!("masked depth {v} is not positive and finite")));
            }
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// Builds from values alone; positive finite values are valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let mask = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(width, height, values, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.mask[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Multiplies every depth by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * factor).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Bilinear depth at a sub-pixel position (pixel centres on integers).
    /// `None` if outside the grid or any of the four neighbours is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if x > w - 1.0 || y > h - 1.0 {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let d = self.get(x0 + dx, y0 + dy)?;
                acc += wx * wy * d;
            }
        }
        Some(acc)
    }

    /// Mean absolute relative error against `gt` over pixels valid in both.
    pub fn mean_abs_rel_error(&self, gt: &DepthMap) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.values.len().min(gt.values.len()) {
            if self.mask[i] && gt.mask[i] {
                sum += (self.values[i] - gt.values[i]).abs() / gt.values[i];
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}
