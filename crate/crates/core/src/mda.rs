//! Multi-view disparity attention: per-entry pose embedding, 2-D positional
//! encoding, linear self-attention within a view and softmax attention
//! across the unordered set of source views.

use epiflow_tensor::nn::{Bound, Linear, ParamSet};
use epiflow_tensor::{concat, Real, Tensor, Var};
use nalgebra::Vector3;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraView, EpipolarField, PixelPoint, Pose};

pub const POSE_CHANNELS: usize = 12;
/// Additive attention bias for masked views.
pub const MASK_BIAS: f64 = -1e4;
const LN_EPS: f64 = 1e-5;

/// `sqrt(max(0, |t| + (2/3) tr(I - R)))`, or with `|t|^2` when `squared`.
pub fn pose_distance(rel: &Pose, squared: bool) -> f64 {
    let n = rel.translation().norm();
    let t = if squared { n * n } else { n };
    let trace = 3.0 - rel.rotation().trace();
    (t + 2.0 / 3.0 * trace).max(0.0).sqrt()
}

/// Angle between the rays from both camera centres to `point`.
pub fn ray_angle(reference: &CameraView, source: &CameraView, point: &Vector3<f64>) -> Result<f64> {
    for view in [reference, source] {
        let depth = view.world_to_camera.apply(point).z;
        if !(depth > 0.0) {
            return Err(Error::PointBehindCamera { depth });
        }
    }
    Ok(angle(&(point - reference.center()), &(point - source.center())))
}

fn angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // atan2 form stays accurate for nearly parallel rays.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Raw embedding `[views, cells, 12]` at the current flows:
/// `(theta, P, p_s (2), ln(d_r/s), ln(d_s/s), r_0 (3), r_i (3))`, all in the
/// reference camera frame with translations divided by `scale`.
/// Degenerate entries are zero.
pub fn compute_pose_embedding<T: Real>(field: &EpipolarField, flows: &[f64], scale: f64, squared: bool) -> Tensor<T> {
    let n = field.cells();
    let k0_inv = field.k0.matrix().try_inverse().expect("invertible intrinsics");
    let mut out = vec![T::zero(); field.views * n * POSE_CHANNELS];
    for v in 0..field.views {
        let rel = field.rel[v].scaled(1.0 / scale);
        let distance = pose_distance(&rel, squared);
        // Source centre in the reference frame.
        let centre = -(rel.rotation().transpose() * rel.translation());
        let (sw, sh) = field.source_sizes[v];
        for c in 0..n {
            let Some(g) = field.entry(v, c) else { continue };
            let e = flows[v * n + c];
            let (d_r, d_s) = (g.depth_at(e) / scale, g.source_depth_at(e) / scale);
            if !(d_r > 0.0 && d_s > 0.0) {
                continue;
            }
            let p_r: PixelPoint = field.ref_pixel(c);
            let x = k0_inv * Vector3::new(p_r.u, p_r.v, 1.0) * d_r;
            let r0 = x.normalize();
            let ri = (x - centre).normalize();
            let p_s = g.position(e);
            let values = [
                angle(&x, &(x - centre)),
                distance,
                2.0 * (p_s.u + 0.5) / sw as f64 - 1.0,
                2.0 * (p_s.v + 0.5) / sh as f64 - 1.0,
                d_r.ln(),
                d_s.ln(),
                r0.x,
                r0.y,
                r0.z,
                ri.x,
                ri.y,
                ri.z,
            ];
            let base = (v * n + c) * POSE_CHANNELS;
            for (slot, x) in out[base..base + POSE_CHANNELS].iter_mut().zip(values) {
                *slot = T::of(x);
            }
        }
    }
    Tensor::new(&[field.views, n, POSE_CHANNELS], out).expect("consistent length")
}

/// `[1, h*w, 4*bands]`: sin and cos of `pi 2^k u/W` and `pi 2^k v/H`.
pub fn positional_encoding<T: Real>(h: usize, w: usize, bands: usize) -> Tensor<T> {
    let ch = 4 * bands;
    Tensor::from_fn(&[1, h * w, ch], |i| {
        let (cell, k) = (i / ch, i % ch);
        let (x, y) = ((cell % w) as f64 / w as f64, (cell / w) as f64 / h as f64);
        let band = (k / 4) as i32;
        let arg = std::f64::consts::PI * 2f64.powi(band) * if k % 4 < 2 { x } else { y };
        T::of(if k % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

/// `[b, l, heads*dh] -> [b*heads, l, dh]`.
fn split_heads<'g, T: Real>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let dh = s[2] / heads;
    Ok(x.reshape(&[s[0], s[1], heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[s[0] * heads, s[1], dh])?)
}

fn merge_heads<'g, T: Real>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let b = s[0] / heads;
    Ok(x.reshape(&[b, heads, s[1], s[2]])?.permute(&[0, 2, 1, 3])?.reshape(&[b, s[1], heads * s[2]])?)
}

fn feature_map<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(x.relu()?.add_scalar(1.0)?)
}

/// Kernelised attention `phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1)` with
/// `phi = relu + 1`; inputs `[b, l, d]`.
pub fn linear_attention_core<'g, T: Real>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    let (fq, fk) = (feature_map(q)?, feature_map(k)?);
    let kv = fk.transpose()?.bmm(v)?;
    let num = fq.bmm(kv)?;
    let den = fq.bmm(fk.sum(1)?.transpose()?)?;
    Ok(num.div(den)?)
}

/// Softmax attention `[b, l, d]` with an optional additive key bias `[b, 1, l]`.
pub fn softmax_attention_core<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    bias: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let d = q.shape()[2];
    let mut scores = q.bmm(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    Ok(scores.softmax(2)?.bmm(v)?)
}

#[derive(Debug, Clone)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Projections {
    fn new<T: Real>(params: &mut ParamSet<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lin = |n: &str| Linear::new(params, &format!("{prefix}.{n}"), d, d, true, &mut *rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MdaBlock {
    self_attn: Projections,
    ffn0: Linear,
    ffn1: Linear,
    cross_attn: Projections,
    heads: usize,
}

impl MdaBlock {
    fn new<T: Real>(params: &mut ParamSet<T>, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            self_attn: Projections::new(params, &format!("{prefix}.self"), d, rng)?,
            ffn0: Linear::new(params, &format!("{prefix}.ffn0"), d, 2 * d, true, rng)?,
            ffn1: Linear::new(params, &format!("{prefix}.ffn1"), 2 * d, d, true, rng)?,
            cross_attn: Projections::new(params, &format!("{prefix}.cross"), d, rng)?,
            heads,
        })
    }

    /// Pre-norm linear self-attention over `l` tokens of each view followed
    /// by a feed-forward layer, both residual. `x`: `[views, l, d]`.
    pub fn linear_self_attention<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = &self.self_attn;
        let n = x.layer_norm(LN_EPS)?;
        let h = self.heads;
        let q = split_heads(a.q.forward(p, n)?, h)?;
        let k = split_heads(a.k.forward(p, n)?, h)?;
        let v = split_heads(a.v.forward(p, n)?, h)?;
        let x = x.add(a.o.forward(p, merge_heads(linear_attention_core(q, k, v)?, h)?)?)?;
        let f = self.ffn1.forward(p, self.ffn0.forward(p, x.layer_norm(LN_EPS)?)?.relu()?)?;
        Ok(x.add(f)?)
    }

    /// Pre-norm softmax attention over the view axis of `x`: `[cells, views, d]`.
    /// `mask`: `[cells, views]` with 1 for usable views.
    pub fn cross_view_attention<'g, T: Real>(
        &self,
        p: &Bound<'g, '_, T>,
        x: Var<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'g, T>> {
        let a = &self.cross_attn;
        let s = x.shape();
        let h = self.heads;
        let n = x.layer_norm(LN_EPS)?;
        let q = split_heads(a.q.forward(p, n)?, h)?;
        let k = split_heads(a.k.forward(p, n)?, h)?;
        let v = split_heads(a.v.forward(p, n)?, h)?;
        let bias = match mask {
            Some(m) => {
                if m.shape() != [s[0], s[1]] {
                    return Err(invalid(format!("view mask {:?} for tokens {s:?}", m.shape())));
                }
                // One row per (cell, head), matching the split layout.
                let t = Tensor::from_fn(&[s[0] * h, 1, s[1]], |i| {
                    let (row, view) = (i / s[1], i % s[1]);
                    let keep = m.data()[(row / h) * s[1] + view];
                    if keep > T::zero() { T::zero() } else { T::of(MASK_BIAS) }
                });
                Some(x.graph().constant(t)?)
            }
            None => None,
        };
        let out = merge_heads(softmax_attention_core(q, k, v, bias)?, h)?;
        Ok(x.add(a.o.forward(p, out)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mda {
    pose_proj: Linear,
    input: Linear,
    blocks: Vec<MdaBlock>,
    use_pose: bool,
}

impl Mda {
    pub fn new<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let cf = cfg.disparity_channels;
        let d = cfg.attention_dim;
        let inputs = 2 * cf + 4 * cfg.posenc_bands;
        Ok(Self {
            pose_proj: Linear::new(params, "mda.pose_proj", POSE_CHANNELS, cf, true, rng)?,
            input: Linear::new(params, "mda.input", inputs, d, true, rng)?,
            blocks: (0..cfg.blocks)
                .map(|b| MdaBlock::new(params, &format!("mda.block{b}"), d, cfg.heads, rng))
                .collect::<Result<_>>()?,
            use_pose: cfg.use_pose_embedding,
        })
    }

    pub fn blocks(&self) -> &[MdaBlock] {
        &self.blocks
    }

    /// Learned projection of the raw embedding to the feature width.
    pub fn project_pose<'g, T: Real>(&self, p: &Bound<'g, '_, T>, pose: Var<'g, T>) -> Result<Var<'g, T>> {
        let projected = self.pose_proj.forward(p, pose)?;
        if self.use_pose {
            Ok(projected)
        } else {
            Ok(projected.scale(0.0)?)
        }
    }

    /// `features`: `[views, cells, c_f]`, `pose`: raw `[views, cells, 12]`,
    /// `posenc`: `[1, cells, 4 bands]`, `mask`: `[cells, views]`.
    /// Returns `[views, cells, d]`.
    pub fn mda_forward<'g, T: Real>(
        &self,
        p: &Bound<'g, '_, T>,
        features: Var<'g, T>,
        pose: Var<'g, T>,
        posenc: Var<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'g, T>> {
        let views = features.shape()[0];
        let pe = if views > 1 { posenc.repeat(0, views)? } else { posenc };
        let x = concat(&[features, self.project_pose(p, pose)?, pe], 2)?;
        let mut x = self.input.forward(p, x)?;
        for block in &self.blocks {
            x = block.linear_self_attention(p, x)?;
            let t = block.cross_view_attention(p, x.permute(&[1, 0, 2])?, mask)?;
            x = t.permute(&[1, 0, 2])?;
        }
        Ok(x)
    }
}
