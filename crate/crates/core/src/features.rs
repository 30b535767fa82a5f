//! Shared-weight matching features, reference context features and the
//! average-pool lookup pyramid.

use epiflow_tensor::nn::{Bound, Conv2d, ParamSet};
use epiflow_tensor::{Real, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;

pub const FINE_STRIDE: usize = 4;
pub const COARSE_STRIDE: usize = 8;
const NORM_EPS: f64 = 1e-5;

/// Per-channel normalisation over the spatial extent of each image.
pub fn instance_norm<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let flat = x.reshape(&[s[0], s[1] * s[2], s[3]])?;
    let mu = flat.mean(1)?;
    let centred = flat.sub(mu)?;
    let sd = centred.square()?.mean(1)?.add_scalar(NORM_EPS)?.sqrt()?;
    Ok(centred.div(sd)?.reshape(&s)?)
}

/// Six 3x3 convolutions with strides 2/1/2/1/2/1 and residual stride-1
/// layers, tapped at 1/4 and 1/8 by 1x1 heads.
#[derive(Debug, Clone)]
struct Trunk {
    layers: [Conv2d; 6],
    fine_head: Conv2d,
    coarse_head: Conv2d,
    norm: bool,
}

impl Trunk {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        stem: usize,
        fine: usize,
        coarse: usize,
        fine_out: usize,
        coarse_out: usize,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = [(3, stem, 2), (stem, stem, 1), (stem, fine, 2), (fine, fine, 1), (fine, coarse, 2), (coarse, coarse, 1)];
        let mut layers = Vec::with_capacity(6);
        for (i, (ci, co, stride)) in spec.into_iter().enumerate() {
            layers.push(Conv2d::new(params, &format!("{prefix}.conv{i}"), ci, co, 3, stride, true, rng)?);
        }
        Ok(Self {
            layers: layers.try_into().expect("six layers"),
            fine_head: Conv2d::new(params, &format!("{prefix}.fine_head"), fine, fine_out, 1, 1, true, rng)?,
            coarse_head: Conv2d::new(params, &format!("{prefix}.coarse_head"), coarse, coarse_out, 1, 1, true, rng)?,
            norm,
        })
    }

    fn act<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = if self.norm { instance_norm(x)? } else { x };
        Ok(x.relu()?)
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, image: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let mut x = image;
        let mut fine = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = self.act(layer.forward(p, x)?)?;
            x = if layer.stride == 1 { x.add(y)? } else { y };
            if i == 3 {
                fine = Some(x);
            }
        }
        let fine = self.fine_head.forward(p, fine.expect("tapped"))?;
        let coarse = self.coarse_head.forward(p, x)?;
        Ok((fine, coarse))
    }
}

/// Matching features `(fine [b, h/4, w/4, c_f], coarse [b, h/8, w/8, c_c])`.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    trunk: Trunk,
}

impl FeatureNet {
    pub fn new<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            trunk: Trunk::new(
                params,
                "features",
                cfg.stem_channels,
                cfg.fine_channels,
                cfg.coarse_channels,
                cfg.fine_channels,
                cfg.coarse_channels,
                cfg.instance_norm,
                rng,
            )?,
        })
    }

    /// `images`: `[b, h, w, 3]` in `[0, 1]`. Every image goes through the
    /// same weights.
    pub fn extract_features<'g, T: Real>(&self, p: &Bound<'g, '_, T>, images: Var<'g, T>) -> Result<FeatureMap<'g, T>> {
        let (fine, coarse) = self.trunk.forward(p, images)?;
        Ok(FeatureMap { fine, coarse })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'g, T: Real> {
    pub fine: Var<'g, T>,
    pub coarse: Var<'g, T>,
}

/// Reference context: a tanh-bounded initial update state and a context part.
#[derive(Debug, Clone)]
pub struct ContextNet {
    trunk: Trunk,
    half: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextLevel<'g, T: Real> {
    pub hidden: Var<'g, T>,
    pub context: Var<'g, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextFeature<'g, T: Real> {
    pub fine: ContextLevel<'g, T>,
    pub coarse: ContextLevel<'g, T>,
}

impl ContextNet {
    pub fn new<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            trunk: Trunk::new(
                params,
                "context",
                cfg.stem_channels,
                cfg.fine_channels,
                cfg.coarse_channels,
                cfg.context_channels,
                cfg.context_channels,
                false,
                rng,
            )?,
            half: cfg.context_channels / 2,
        })
    }

    pub fn extract_context<'g, T: Real>(&self, p: &Bound<'g, '_, T>, image: Var<'g, T>) -> Result<ContextFeature<'g, T>> {
        let (fine, coarse) = self.trunk.forward(p, image)?;
        let split = |x: Var<'g, T>| -> Result<ContextLevel<'g, T>> {
            Ok(ContextLevel {
                hidden: x.slice(3, 0, self.half)?.tanh()?,
                context: x.slice(3, self.half, self.half)?.relu()?,
            })
        };
        Ok(ContextFeature {
            fine: split(fine)?,
            coarse: split(coarse)?,
        })
    }
}

/// `levels` maps, each a 2x2 average pool of the previous one.
pub fn build_lookup_pyramid<'g, T: Real>(fmap: Var<'g, T>, levels: usize) -> Result<Vec<Var<'g, T>>> {
    let mut out = vec![fmap];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").avg_pool2()?;
        out.push(next);
    }
    Ok(out)
}
