//! The iterative update loop: per-view flow increments and fusion weights
//! from a shared recurrent state, weighted depth fusion, depth-to-flow
//! redistribution and the coarse-to-fine schedule.

use epiflow_tensor::nn::{Bound, Conv2d, ParamSet};
use epiflow_tensor::{concat, Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::disparity::{
    estimate_uncertainty, flow_encoding, init_hidden_state, sample_cost_volume, DisparityEncoder,
};
use crate::error::{degenerate, invalid, Result};
use crate::features::{build_lookup_pyramid, ContextLevel, ContextNet, FeatureNet, COARSE_STRIDE, FINE_STRIDE};
use crate::geometry::{full_to_level, CameraView, EpipolarField};
use crate::mda::{compute_pose_embedding, positional_encoding, Mda, MASK_BIAS};
use crate::raster::DepthMap;

/// Flows at the segment midpoints and their uniformly weighted depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    /// `[views * cells]`, all zero.
    pub flows: Vec<f64>,
    /// `[cells]`; `None` where every view is degenerate.
    pub depth: Vec<Option<f64>>,
    /// Geometric mean of the initial depth, the scene's length unit.
    pub scale: f64,
}

/// Reads nothing but camera geometry: no depth range enters here.
pub fn initialize(field: &EpipolarField) -> Result<Initialization> {
    let n = field.cells();
    let flows = vec![0.0; field.views * n];
    let depth: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let ds: Vec<f64> = (0..field.views)
                .filter_map(|v| field.entry(v, c).map(|g| g.depth_at(0.0)))
                .collect();
            (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
        })
        .collect();
    let logs: Vec<f64> = depth.iter().flatten().map(|d| d.ln()).collect();
    if logs.is_empty() {
        return Err(degenerate("no pixel has a usable source view"));
    }
    let scale = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    Ok(Initialization { flows, depth, scale })
}

/// `sum_i softmax(logits)_i depth(e_i)` over the usable views of each cell.
pub fn fuse_depth(field: &EpipolarField, flows: &[f64], logits: &[f64]) -> Vec<Option<f64>> {
    let n = field.cells();
    (0..n)
        .map(|c| {
            let views: Vec<usize> = (0..field.views).filter(|&v| field.is_valid(v, c)).collect();
            let top = views.iter().map(|&v| logits[v * n + c]).fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for &v in &views {
                let w = (logits[v * n + c] - top).exp();
                num += w * field.depth(v, c, flows[v * n + c]);
                den += w;
            }
            (!views.is_empty()).then(|| num / den)
        })
        .collect()
}

/// Per-view flows reproducing `depth`, clamped to the valid intervals.
/// Returns the flows and the number of clamped entries.
pub fn redistribute_flows(field: &EpipolarField, depth: &[f64]) -> (Vec<f64>, usize) {
    let n = field.cells();
    let mut clamped = 0;
    let flows = (0..field.views * n)
        .map(|i| {
            let (e, hit) = field.flow_for_depth(i / n, i % n, depth[i % n]);
            clamped += hit as usize;
            e
        })
        .collect();
    (flows, clamped)
}

/// Convolutional GRU with standard gating.
#[derive(Debug, Clone)]
pub struct ConvGru {
    z: Conv2d,
    r: Conv2d,
    q: Conv2d,
}

impl ConvGru {
    pub const UPDATE_BIAS: &'static str = "update.gru.z.bias";

    fn new<T: Real>(params: &mut ParamSet<T>, hidden: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = hidden + inputs;
        Ok(Self {
            z: Conv2d::new(params, "update.gru.z", c, hidden, 3, 1, true, rng)?,
            r: Conv2d::new(params, "update.gru.r", c, hidden, 3, 1, true, rng)?,
            q: Conv2d::new(params, "update.gru.q", c, hidden, 3, 1, true, rng)?,
        })
    }

    /// `h' = h + z (q - h)`.
    pub fn step<'g, T: Real>(&self, p: &Bound<'g, '_, T>, h: Var<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let hx = concat(&[h, x], 3)?;
        let z = self.z.forward(p, hx)?.sigmoid()?;
        let r = self.r.forward(p, hx)?.sigmoid()?;
        let q = self.q.forward(p, concat(&[r.mul(h)?, x], 3)?)?.tanh()?;
        Ok(h.add(z.mul(q.sub(h)?)?)?)
    }
}

/// Shared recurrent state plus the per-view increment and weight heads.
#[derive(Debug, Clone)]
pub struct UpdateBlock {
    gru: ConvGru,
    head0: Conv2d,
    head1: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateOutput<'g, T: Real> {
    pub hidden: Var<'g, T>,
    /// `[views, cells]`, in level-grid pixels.
    pub delta: Var<'g, T>,
    /// `[views, cells]`.
    pub logits: Var<'g, T>,
}

impl UpdateBlock {
    fn new<T: Real>(params: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ch = cfg.gru_channels();
        let d = cfg.attention_dim;
        let gru_in = 2 * d + 4 + 1 + ch;
        let head_in = ch + d + 2;
        let block = Self {
            gru: ConvGru::new(params, ch, gru_in, rng)?,
            head0: Conv2d::new(params, "update.head0", head_in, ch, 3, 1, true, rng)?,
            head1: Conv2d::new(params, "update.head1", ch, 2, 3, 1, true, rng)?,
        };
        // Start close to "no increment, equal weights".
        epiflow_tensor::nn::rescale(params, "update.head1.weight", 0.1)?;
        epiflow_tensor::nn::fill(params, "update.head1.bias", 0.0)?;
        Ok(block)
    }

    pub fn gru(&self) -> &ConvGru {
        &self.gru
    }

    /// `hidden`: `[1, h, w, c_h]`, `mda`: `[views, cells, d]`,
    /// `flow_enc`: `[views, h, w, 2]`, `log_depth`: `[1, h, w, 1]`,
    /// `context`: `[1, h, w, c_h]`.
    pub fn gru_step<'g, T: Real>(
        &self,
        p: &Bound<'g, '_, T>,
        hidden: Var<'g, T>,
        mda: Var<'g, T>,
        flow_enc: Var<'g, T>,
        log_depth: Var<'g, T>,
        context: Var<'g, T>,
    ) -> Result<UpdateOutput<'g, T>> {
        let hs = hidden.shape();
        let (h, w) = (hs[1], hs[2]);
        let views = mda.shape()[0];
        let d = mda.shape()[2];
        let per_view = mda.reshape(&[views, h, w, d])?;
        let pooled = concat(
            &[per_view.mean(0)?, per_view.max(0)?, flow_enc.mean(0)?, flow_enc.max(0)?, log_depth, context],
            3,
        )?;
        let hidden = self.gru.step(p, hidden, pooled)?;
        let broadcast = if views > 1 { hidden.repeat(0, views)? } else { hidden };
        let x = concat(&[broadcast, per_view, flow_enc], 3)?;
        let out = self.head1.forward(p, self.head0.forward(p, x)?.relu()?)?;
        let out = out.reshape(&[views, h * w, 2])?;
        Ok(UpdateOutput {
            hidden,
            delta: out.slice(2, 0, 1)?.reshape(&[views, h * w])?,
            logits: out.slice(2, 1, 1)?.reshape(&[views, h * w])?,
        })
    }
}

/// Values recorded at one iteration, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `[views * cells]`, `None` for degenerate entries.
    pub per_view: Vec<Option<f64>>,
    /// `[views * cells]`, softmax weights.
    pub weights: Vec<f64>,
    /// `[cells]`, `None` where no view is usable.
    pub fused: Vec<Option<f64>>,
}

#[derive(Debug)]
pub struct Forward<'g, T: Real> {
    /// Full-resolution `[1, H, W, 1]` fused depth of every coarse iteration.
    pub coarse: Vec<Var<'g, T>>,
    /// Same for the fine iterations.
    pub fine: Vec<Var<'g, T>>,
    /// Full-resolution mask: some source view is usable at the nearest cell.
    pub mask: Vec<bool>,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub clamp_events: usize,
    pub traces: Vec<IterationTrace>,
}

impl<'g, T: Real> Forward<'g, T> {
    pub fn last(&self) -> Var<'g, T> {
        *self.fine.last().or(self.coarse.last()).expect("at least one iteration")
    }

    pub fn depth_map(&self, var: Var<'g, T>) -> Result<DepthMap> {
        let values = var.value().data().iter().map(|x| x.f64()).collect();
        DepthMap::new(self.width, self.height, values, self.mask.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub depth: DepthMap,
    pub iterations: Vec<DepthMap>,
    pub scale: f64,
    pub clamp_events: usize,
    pub traces: Vec<IterationTrace>,
}

struct Level<'g, T: Real> {
    field: EpipolarField,
    reference: Var<'g, T>,
    pyramid: Vec<Var<'g, T>>,
    context: ContextLevel<'g, T>,
    posenc: Var<'g, T>,
    view_mask: Tensor<T>,
    coeffs: [Var<'g, T>; 4],
    bounds: (Tensor<T>, Tensor<T>),
    logit_bias: Var<'g, T>,
}

struct State<'g, T: Real> {
    flows: Vec<f64>,
    depth: Vec<f64>,
    disparity_hidden: Var<'g, T>,
    hidden: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    features: FeatureNet,
    context: ContextNet,
    encoder: DisparityEncoder,
    mda: Mda,
    update: UpdateBlock,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let features = FeatureNet::new(&mut params, &config, &mut rng)?;
        let context = ContextNet::new(&mut params, &config, &mut rng)?;
        let encoder = DisparityEncoder::new(&mut params, &config, &mut rng)?;
        let mda = Mda::new(&mut params, &config, &mut rng)?;
        let update = UpdateBlock::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            features,
            context,
            encoder,
            mda,
            update,
        })
    }

    pub fn features(&self) -> &FeatureNet {
        &self.features
    }

    pub fn context(&self) -> &ContextNet {
        &self.context
    }

    pub fn encoder(&self) -> &DisparityEncoder {
        &self.encoder
    }

    pub fn mda(&self) -> &Mda {
        &self.mda
    }

    pub fn update(&self) -> &UpdateBlock {
        &self.update
    }

    /// Same architecture with another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            features: self.features.clone(),
            context: self.context.clone(),
            encoder: self.encoder.clone(),
            mda: self.mda.clone(),
            update: self.update.clone(),
        }
    }

    /// Frozen-parameter inference; `views[0]` is the reference.
    pub fn run_inference(&self, views: &[CameraView]) -> Result<Inference> {
        let graph = Graph::new();
        let bound = Bound::new(&graph, &self.params);
        let fwd = self.forward(&bound, views)?;
        let iterations = fwd
            .coarse
            .iter()
            .chain(&fwd.fine)
            .map(|v| fwd.depth_map(*v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference {
            depth: fwd.depth_map(fwd.last())?,
            iterations,
            scale: fwd.scale,
            clamp_events: fwd.clamp_events,
            traces: fwd.traces,
        })
    }

    /// Differentiable forward pass; `views[0]` is the reference and all
    /// views share one image size.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, views: &[CameraView]) -> Result<Forward<'g, T>> {
        let cfg = &self.config;
        if views.len() < 2 {
            return Err(invalid("need a reference and at least one source view"));
        }
        let (w, h) = (views[0].width, views[0].height);
        if views.iter().any(|v| v.width != w || v.height != h) {
            return Err(invalid("all views must share one image size"));
        }
        let g = p.graph();
        let n = views.len();
        let mut pixels = Vec::with_capacity(n * h * w * 3);
        for v in views {
            pixels.extend(v.image.data().iter().map(|&x| T::of(x as f64)));
        }
        let images = g.constant(Tensor::new(&[n, h, w, 3], pixels)?)?;
        let fmap = self.features.extract_features(p, images)?;
        let ctx = self.context.extract_context(p, images.slice(0, 0, 1)?)?;
        let sources: Vec<&CameraView> = views[1..].iter().collect();

        let mut coarse = self.level(p, &views[0], &sources, COARSE_STRIDE, fmap.coarse, ctx.coarse)?;
        let init = initialize(&coarse.field)?;
        let scale = init.scale;
        coarse.field.set_fallback_depth(scale);
        let depth0: Vec<f64> = init.depth.iter().map(|d| d.unwrap_or(scale)).collect();
        let (hc, wc) = (coarse.field.height, coarse.field.width);
        let disparity_hidden = g.constant(init_hidden_state(
            cfg.seed,
            &coarse.field.rel,
            hc,
            wc,
            cfg.hidden_channels,
        ))?;
        let mut state = State {
            flows: init.flows,
            depth: depth0,
            disparity_hidden,
            hidden: coarse.context.hidden,
        };
        let mut out = Forward {
            coarse: Vec::new(),
            fine: Vec::new(),
            mask: Vec::new(),
            width: w,
            height: h,
            scale,
            clamp_events: 0,
            traces: Vec::new(),
        };
        let mut fused = None;
        for _ in 0..cfg.coarse_iters {
            let f = self.iterate(p, &coarse, &mut state, &mut out)?;
            out.coarse.push(f.reshape(&[1, hc, wc, 1])?.resize_bilinear(h, w)?);
            fused = Some(f);
        }
        let mut last_field = coarse.field;
        if cfg.fine_iters > 0 {
            let mut fine = self.level(p, &views[0], &sources, FINE_STRIDE, fmap.fine, ctx.fine)?;
            fine.field.set_fallback_depth(scale);
            let (hf, wf) = (fine.field.height, fine.field.width);
            let up = fused
                .expect("coarse ran")
                .detach()?
                .reshape(&[1, hc, wc, 1])?
                .resize_bilinear(hf, wf)?;
            let depth: Vec<f64> = up
                .value()
                .data()
                .iter()
                .enumerate()
                .map(|(c, x)| if fine.field.any_valid(c) { x.f64() } else { scale })
                .collect();
            let (flows, clamped) = redistribute_flows(&fine.field, &depth);
            out.clamp_events += clamped;
            state = State {
                flows,
                depth,
                disparity_hidden: state.disparity_hidden.resize_bilinear(hf, wf)?,
                hidden: fine.context.hidden,
            };
            for _ in 0..cfg.fine_iters {
                let f = self.iterate(p, &fine, &mut state, &mut out)?;
                out.fine.push(f.reshape(&[1, hf, wf, 1])?.resize_bilinear(h, w)?);
            }
            last_field = fine.field;
        }
        out.mask = (0..h * w)
            .map(|i| {
                let s = last_field.stride;
                let cx = full_to_level((i % w) as f64, s).round().clamp(0.0, (last_field.width - 1) as f64);
                let cy = full_to_level((i / w) as f64, s).round().clamp(0.0, (last_field.height - 1) as f64);
                last_field.any_valid(cy as usize * last_field.width + cx as usize)
            })
            .collect();
        Ok(out)
    }

    fn level<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        reference: &CameraView,
        sources: &[&CameraView],
        stride: usize,
        fmap: Var<'g, T>,
        context: ContextLevel<'g, T>,
    ) -> Result<Level<'g, T>> {
        let g = p.graph();
        let field = EpipolarField::build(reference, sources, stride)?;
        let views = field.views;
        let s = fmap.shape();
        if s[1] != field.height || s[2] != field.width {
            return Err(invalid(format!("feature grid {s:?} does not match the level grid")));
        }
        let pyramid = build_lookup_pyramid(fmap.slice(0, 1, views)?, self.config.pyramid_levels)?;
        let cells = field.cells();
        let valid = field.valid_mask::<T>();
        let view_mask = Tensor::from_fn(&[cells, views], |i| valid.data()[(i % views) * cells + i / views]);
        let [a, b, c, d] = field.coefficients::<T>();
        let logit_bias = g.constant(valid.map(|m| if m > T::zero() { T::zero() } else { T::of(MASK_BIAS) }))?;
        Ok(Level {
            reference: fmap.slice(0, 0, 1)?,
            pyramid,
            context,
            posenc: g.constant(positional_encoding(field.height, field.width, self.config.posenc_bands))?,
            view_mask,
            coeffs: [g.constant(a)?, g.constant(b)?, g.constant(c)?, g.constant(d)?],
            bounds: field.bound_tensors(),
            logit_bias,
            field,
        })
    }

    /// One update; returns the fused depth `[1, cells]` on the tape and
    /// advances `state` with detached flows.
    fn iterate<'g>(
        &self,
        p: &Bound<'g, '_, T>,
        level: &Level<'g, T>,
        state: &mut State<'g, T>,
        out: &mut Forward<'g, T>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let g = p.graph();
        let field = &level.field;
        let (views, cells) = (field.views, field.cells());
        let (h, w) = (field.height, field.width);
        let flows = g.constant(Tensor::from_fn(&[views, cells], |i| T::of(state.flows[i])))?;
        let volume = sample_cost_volume(level.reference, &level.pyramid, field, flows, cfg.samples)?;
        let flow_enc = g.constant(flow_encoding::<T>(field, &state.flows))?;
        let encoded = if cfg.use_uncertainty_hidden {
            let u = estimate_uncertainty(volume)?;
            self.encoder.encode_disparity(p, u, state.disparity_hidden, volume, flow_enc)?
        } else {
            let u = g.constant(Tensor::zeros(&[views, h, w, 1]))?;
            let zero = g.constant(Tensor::zeros(&state.disparity_hidden.shape()))?;
            let mut e = self.encoder.encode_disparity(p, u, zero, volume, flow_enc)?;
            e.hidden = zero;
            e
        };
        let pose = g.constant(compute_pose_embedding::<T>(
            field,
            &state.flows,
            out.scale,
            cfg.squared_translation,
        ))?;
        let features = encoded.feature.reshape(&[views, cells, cfg.disparity_channels])?;
        let mda = self.mda.mda_forward(p, features, pose, level.posenc, Some(&level.view_mask))?;
        let log_depth = g.constant(Tensor::from_fn(&[1, h, w, 1], |c| T::of((state.depth[c] / out.scale).ln())))?;
        let upd = self
            .update
            .gru_step(p, state.hidden, mda, flow_enc, log_depth, level.context.context)?;

        let stride = field.stride as f64;
        let moved = flows.add(upd.delta.scale(stride)?)?;
        out.clamp_events += moved
            .value()
            .data()
            .iter()
            .zip(level.bounds.0.data().iter().zip(level.bounds.1.data()))
            .filter(|(e, (lo, hi))| *e < lo || *e > hi)
            .count();
        let e = moved.clamp_between(&level.bounds.0, &level.bounds.1)?;
        let [a, b, c, d] = level.coeffs;
        let per_view = a.add(b.mul(e)?)?.div(c.add(d.mul(e)?)?)?;
        let weights = upd.logits.add(level.logit_bias)?.softmax(0)?;
        let fused = weights.mul(per_view)?.sum(0)?;

        let depth: Vec<f64> = fused
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(c, x)| if field.any_valid(c) { x.f64() } else { out.scale })
            .collect();
        let (next, clamped) = redistribute_flows(field, &depth);
        out.clamp_events += clamped;
        out.traces.push(IterationTrace {
            stride: field.stride,
            height: h,
            width: w,
            per_view: per_view
                .value()
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| field.is_valid(i / cells, i % cells).then(|| x.f64()))
                .collect(),
            weights: weights.value().data().iter().map(|x| x.f64()).collect(),
            fused: depth.iter().enumerate().map(|(c, &x)| field.any_valid(c).then_some(x)).collect(),
        });
        state.flows = next;
        state.depth = depth;
        state.disparity_hidden = encoded.hidden;
        state.hidden = upd.hidden;
        Ok(fused)
    }
}
