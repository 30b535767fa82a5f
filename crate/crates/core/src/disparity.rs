//! Per-view matching evidence along epipolar lines: the correlation cost
//! volume, its variance-based uncertainty and the recurrent disparity state.

use epiflow_tensor::nn::{Bound, Conv2d, ParamSet};
use epiflow_tensor::{concat, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::geometry::{full_to_level, EpipolarField, Pose};

/// Full-resolution sample positions `[views, cells, samples]` of one
/// pyramid level. Samples sit `stride * 2^level` full-resolution pixels
/// apart, i.e. one pixel of that level, centred on the current flow.
/// Degenerate entries sample the origin.
pub fn sample_positions(field: &EpipolarField, flows: &[f64], samples: usize, level: usize) -> Vec<[f64; 2]> {
    let step = (field.stride << level) as f64;
    let half = (samples / 2) as f64;
    let n = field.cells();
    let mut out = Vec::with_capacity(field.views * n * samples);
    for v in 0..field.views {
        for c in 0..n {
            let e = flows[v * n + c];
            for k in 0..samples {
                out.push(match field.entry(v, c) {
                    Some(g) => {
                        let p = g.position(e + (k as f64 - half) * step);
                        [p.u, p.v]
                    }
                    None => [0.0, 0.0],
                });
            }
        }
    }
    out
}

/// Cost volume `[views, h, w, levels * samples]`.
///
/// `flows` is `[views, cells]` on the same graph; the sample points are
/// differentiable functions of it. `reference` is `[1, h, w, c]` and each
/// pyramid level `[views, h_p, w_p, c]`.
pub fn sample_cost_volume<'g, T: Real>(
    reference: Var<'g, T>,
    pyramid: &[Var<'g, T>],
    field: &EpipolarField,
    flows: Var<'g, T>,
    samples: usize,
) -> Result<Var<'g, T>> {
    let g = reference.graph();
    let (views, cells) = (field.views, field.cells());
    let rs = reference.shape();
    if rs[0] != 1 || rs[1] != field.height || rs[2] != field.width || flows.shape() != [views, cells] {
        return Err(invalid(format!(
            "cost volume inputs {rs:?} / {:?} do not match the field",
            flows.shape()
        )));
    }
    let ch = rs[3];
    let per_entry = |f: &dyn Fn(&crate::geometry::EpipolarGeometry) -> f64| -> Result<Var<'g, T>> {
        let t = Tensor::from_fn(&[views, cells, 1], |i| {
            T::of(field.entry(i / cells, i % cells).map_or(0.0, f))
        });
        Ok(g.constant(t)?)
    };
    let bx = per_entry(&|e| e.base_point.u)?;
    let by = per_entry(&|e| e.base_point.v)?;
    let dx = per_entry(&|e| e.e_dir.x)?;
    let dy = per_entry(&|e| e.e_dir.y)?;
    let valid = per_entry(&|_| 1.0)?;
    let e = flows.reshape(&[views, cells, 1])?;
    let half = (samples / 2) as f64;
    let reference = reference.reshape(&[1, cells, 1, ch])?;
    let mut channels = Vec::with_capacity(pyramid.len());
    for (level, src) in pyramid.iter().enumerate() {
        let step = (field.stride << level) as f64;
        let offsets = g.constant(Tensor::from_fn(&[1, 1, samples], |k| T::of((k as f64 - half) * step)))?;
        // Degenerate entries collapse onto the origin.
        let along = e.add(offsets)?.mul(valid)?;
        let scale = step;
        let to_level = |base: Var<'g, T>, dir: Var<'g, T>| -> Result<Var<'g, T>> {
            Ok(base.add(dir.mul(along)?)?.add_scalar(0.5)?.scale(1.0 / scale)?.add_scalar(-0.5)?)
        };
        let x = to_level(bx, dx)?.reshape(&[views, cells * samples, 1])?;
        let y = to_level(by, dy)?.reshape(&[views, cells * samples, 1])?;
        let points = concat(&[x, y], 2)?;
        let sampled = src.bilinear_sample(points)?.reshape(&[views, cells, samples, ch])?;
        channels.push(sampled.mul(reference)?.sum(3)?.scale(1.0 / (ch as f64).sqrt())?);
    }
    let volume = concat(&channels, 2)?;
    Ok(volume.reshape(&[views, field.height, field.width, pyramid.len() * samples])?)
}

/// Level-grid coordinates of the samples, matching what
/// [`sample_cost_volume`] feeds to the bilinear sampler.
pub fn level_coordinates(full: [f64; 2], stride: usize, level: usize) -> [f64; 2] {
    let s = stride << level;
    [full_to_level(full[0], s), full_to_level(full[1], s)]
}

/// `U = 1 - sigmoid(mean squared deviation over channels)`, `[.., 1]`.
pub fn estimate_uncertainty<'g, T: Real>(volume: Var<'g, T>) -> Result<Var<'g, T>> {
    let axis = volume.shape().len() - 1;
    Ok(volume.variance(axis)?.sigmoid()?.neg()?.add_scalar(1.0)?)
}

/// `[views, h, w, 2]`: position inside the clamp interval mapped to
/// `[-1, 1]`, and a validity flag.
pub fn flow_encoding<T: Real>(field: &EpipolarField, flows: &[f64]) -> Tensor<T> {
    let n = field.cells();
    Tensor::from_fn(&[field.views, field.height, field.width, 2], |i| {
        let (entry, ch) = (i / 2, i % 2);
        let (v, c) = (entry / n, entry % n);
        if !field.is_valid(v, c) {
            return T::zero();
        }
        if ch == 1 {
            return T::one();
        }
        let (lo, hi) = field.bounds(v, c);
        T::of(2.0 * (flows[entry] - lo) / (hi - lo) - 1.0)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of the relative pose with the translation reduced to its direction,
/// so that globally rescaled scenes draw the same initial state.
pub fn pose_hash(rel: &Pose) -> u64 {
    let t = rel.translation();
    let n = t.norm();
    let dir = if n > 0.0 { t / n } else { *t };
    rel.rotation()
        .iter()
        .chain(dir.iter())
        .fold(0x5eed_u64, |h, &x| splitmix(h ^ ((x * 1e6).round() as i64 as u64)))
}

/// Gaussian initial disparity state `[views, h, w, channels]`, one stream
/// per view keyed by its relative pose.
pub fn init_hidden_state<T: Real>(seed: u64, rel: &[Pose], h: usize, w: usize, channels: usize) -> Tensor<T> {
    let per = h * w * channels;
    let mut data = Vec::with_capacity(rel.len() * per);
    for pose in rel {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed) ^ pose_hash(pose));
        data.extend((0..per).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))));
    }
    Tensor::new(&[rel.len(), h, w, channels], data).expect("consistent length")
}

/// Two conv stacks over `concat(cost, U, flow encoding, H_prev)`: one for the
/// disparity feature, one for a gated update of the hidden state.
#[derive(Debug, Clone)]
pub struct DisparityEncoder {
    feat0: Conv2d,
    feat1: Conv2d,
    gate: Conv2d,
    candidate: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded<'g, T: Real> {
    pub feature: Var<'g, T>,
    pub hidden: Var<'g, T>,
}

impl DisparityEncoder {
    pub const GATE_BIAS: &'static str = "disparity.gate.bias";

    pub fn new<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let inputs = cfg.cost_channels() + 1 + 2 + cfg.hidden_channels;
        let (cf, cd) = (cfg.disparity_channels, cfg.hidden_channels);
        Ok(Self {
            feat0: Conv2d::new(params, "disparity.feat0", inputs, cf, 3, 1, true, rng)?,
            feat1: Conv2d::new(params, "disparity.feat1", cf, cf, 3, 1, true, rng)?,
            gate: Conv2d::new(params, "disparity.gate", inputs, cd, 3, 1, true, rng)?,
            candidate: Conv2d::new(params, "disparity.candidate", inputs, cd, 3, 1, true, rng)?,
        })
    }

    /// All inputs `[views, h, w, _]`.
    pub fn encode_disparity<'g, T: Real>(
        &self,
        p: &Bound<'g, '_, T>,
        uncertainty: Var<'g, T>,
        hidden: Var<'g, T>,
        volume: Var<'g, T>,
        flow_enc: Var<'g, T>,
    ) -> Result<Encoded<'g, T>> {
        let x = concat(&[volume, uncertainty, flow_enc, hidden], 3)?;
        let feature = self.feat1.forward(p, self.feat0.forward(p, x)?.relu()?)?;
        let gate = self.gate.forward(p, x)?.sigmoid()?;
        let candidate = self.candidate.forward(p, x)?.tanh()?;
        let hidden = hidden.add(gate.mul(candidate.sub(hidden)?)?)?;
        Ok(Encoded { feature, hidden })
    }
}

