//! Iteration-discounted depth loss, AdamW and the desk-scale training loop.

use std::io::Write;

use epiflow_tensor::nn::{Bound, ParamSet};
use epiflow_tensor::{Graph, Real, Tensor, TensorError, Var};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::raster::DepthMap;
use crate::refiner::Model;
use crate::synthdata::Scene;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Weight iteration `k` of a stage of length `j` by `gamma^(j-k-1)`
    /// instead of `gamma^k`.
    pub reverse_discount: bool,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub halve_every: usize,
    /// Scenes per optimiser step; gradients are averaged.
    pub batch: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap, disabled when zero.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            reverse_discount: false,
            lr: 2e-4,
            epochs: 16,
            steps_per_epoch: 125,
            halve_every: 4,
            batch: 1,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma must lie in (0, 1]"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(invalid("lr must be positive, decay and clip non-negative"));
        }
        if self.steps_per_epoch == 0 || self.halve_every == 0 || self.batch == 0 {
            return Err(invalid("steps per epoch, halving period and batch must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

fn discount(gamma: f64, k: usize, len: usize, reverse: bool) -> f64 {
    gamma.powi(if reverse { len - k - 1 } else { k } as i32)
}

/// `sum_stages sum_k gamma^k mean_mask |gt - d_k| / mean_mask(gt)`.
///
/// Each depth is `[1, H, W, 1]`. The loss is invariant to a common scaling
/// of `gt` and the predictions.
pub fn depth_loss<'g, T: Real>(stages: &[&[Var<'g, T>]], gt: &DepthMap, gamma: f64, reverse: bool) -> Result<Var<'g, T>> {
    let count = gt.valid_count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = gt.values().iter().zip(gt.mask()).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>() / count as f64;
    let (w, h) = (gt.width(), gt.height());
    let shape = [1, h, w, 1];
    let weight = Tensor::from_fn(&shape, |i| T::of(if gt.mask()[i] { 1.0 / (count as f64 * mean) } else { 0.0 }));
    let target = Tensor::from_fn(&shape, |i| T::of(if gt.mask()[i] { gt.values()[i] } else { 0.0 }));
    let first = stages.iter().flat_map(|s| s.iter()).next().ok_or_else(|| invalid("no predictions"))?;
    let g = first.graph();
    let (weight, target) = (g.constant(weight)?, g.constant(target)?);
    let mut total: Option<Var<'g, T>> = None;
    for stage in stages {
        for (k, d) in stage.iter().enumerate() {
            if d.shape() != shape {
                return Err(invalid(format!("prediction {:?} vs ground truth {shape:?}", d.shape())));
            }
            let term = d
                .sub(target)?
                .abs()?
                .mul(weight)?
                .sum_all()?
                .scale(discount(gamma, k, stage.len(), reverse))?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("at least one prediction"))
}

/// Decoupled-weight-decay Adam over the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| (p.name.clone(), Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())))
                .collect(),
        }
    }

    /// Applies one update; `grads` in the order of [`Bound::gradients`].
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(invalid("gradient list does not match the optimiser state"));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((name, m, v), (gname, g)) in self.moments.iter_mut().zip(grads) {
            if name != gname {
                return Err(invalid(format!("gradient for {gname} where {name} was expected")));
            }
            let p = params.get_mut(name)?;
            let (pd, md, vd) = (p.tensor.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i].f64();
                let mi = b1 * md[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].f64() + (1.0 - b2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let x = pd[i].f64();
                let x = x - lr * self.weight_decay * x - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pd[i] = T::of(x);
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::from_fn(&[2], |i| {
            // Split so the count survives a 32-bit round trip.
            T::of(if i == 0 { (self.step >> 20) as f64 } else { (self.step & 0xfffff) as f64 })
        }))];
        for (name, m, v) in &self.moments {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Normalised mean absolute depth error on the held-out scenes, logged
    /// at the end of each epoch.
    pub val_epe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Real> {
    pub best: ParamSet<T>,
    pub best_val: Option<f64>,
    pub history: Vec<StepRecord>,
}

/// Model, optimiser and schedule position; resumable from [`Trainer::state`].
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at_epoch(self.step / self.config.steps_per_epoch)
    }

    /// Scenes used at `step`: a fixed cyclic order over the training set.
    pub fn batch_indices(&self, step: usize, scenes: usize) -> Vec<usize> {
        (0..self.config.batch).map(|b| (step * self.config.batch + b) % scenes).collect()
    }

    /// Loss and gradients for one scene.
    pub fn scene_gradients(&self, scene: &Scene) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
        let graph = Graph::new();
        let bound = Bound::new(&graph, &self.model.params);
        let fwd = self.model.forward(&bound, &scene.views)?;
        let gt = &scene.gt.depths[0];
        let mask: Vec<bool> = gt.mask().iter().zip(&fwd.mask).map(|(a, b)| *a && *b).collect();
        let gt = DepthMap::new(gt.width(), gt.height(), gt.values().to_vec(), mask)?;
        let loss = depth_loss(
            &[&fwd.coarse, &fwd.fine],
            &gt,
            self.config.gamma,
            self.config.reverse_discount,
        )?;
        let value = loss.value().item().f64();
        let grads = graph.backward(loss)?;
        Ok((value, bound.gradients(&grads)))
    }

    /// One optimiser step over a batch drawn from `scenes`.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(invalid("empty training set"));
        }
        let indices = self.batch_indices(self.step, scenes.len());
        let mut total = 0.0;
        let mut acc: Option<Vec<(String, Tensor<T>)>> = None;
        let non_finite = |scene| Error::NonFiniteLoss { step: self.step, scene };
        for &i in &indices {
            let (loss, grads) = self.scene_gradients(&scenes[i]).map_err(|e| match e {
                Error::Tensor(TensorError::NonFiniteValue { .. }) => non_finite(i),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(non_finite(i));
            }
            total += loss;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for ((_, x), (_, y)) in a.iter_mut().zip(&grads) {
                        for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                            *p += *q;
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("non-empty batch");
        let inv = 1.0 / indices.len() as f64;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| (x.f64() * inv).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(non_finite(indices[0]));
        }
        let factor = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            inv * self.config.clip_norm / norm
        } else {
            inv
        };
        for (_, g) in &mut grads {
            *g = g.map(|x| x * T::of(factor));
        }
        let lr = self.lr();
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(total * inv)
    }

    /// Normalised mean absolute depth error over `scenes`.
    pub fn validate(&self, scenes: &[Scene]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(invalid("empty validation set"));
        }
        let mut sum = 0.0;
        for scene in scenes {
            let inf = self.model.run_inference(&scene.views)?;
            sum += normalized_error(&inf.depth, &scene.gt.depths[0])?;
        }
        Ok(sum / scenes.len() as f64)
    }

    /// Runs the remaining schedule, logging one JSON line per step.
    pub fn run(&mut self, train: &[Scene], val: &[Scene], log: &mut dyn Write) -> Result<TrainReport<T>> {
        let mut report = TrainReport {
            best: self.model.params.clone(),
            best_val: None,
            history: Vec::new(),
        };
        let spe = self.config.steps_per_epoch;
        while self.step < self.config.total_steps() {
            let (step, lr) = (self.step, self.lr());
            let loss = self.train_step(train)?;
            let epoch_end = self.step % spe == 0;
            let val_epe = if epoch_end && !val.is_empty() { Some(self.validate(val)?) } else { None };
            if let Some(v) = val_epe {
                if report.best_val.is_none_or(|b| v < b) {
                    report.best_val = Some(v);
                    report.best = self.model.params.clone();
                }
            }
            let record = StepRecord {
                step,
                epoch: step / spe,
                loss,
                lr,
                val_epe,
            };
            writeln!(log, "{}", serde_json::to_string(&record).expect("plain record"))?;
            report.history.push(record);
        }
        if val.is_empty() {
            report.best = self.model.params.clone();
        }
        Ok(report)
    }

    /// Parameters, optimiser moments and the step counter in one set.
    pub fn state(&self) -> Result<ParamSet<T>> {
        let mut out = self.model.params.clone();
        for (name, t) in self.optimizer.entries() {
            out.insert(&name, t, false)?;
        }
        Ok(out)
    }

    /// Rebuilds a trainer from [`Trainer::state`] output.
    pub fn resume(model: Model<T>, config: TrainConfig, state: &ParamSet<T>) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        let model_entries = t
            .model
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), state.get(&p.name)?.tensor.clone())))
            .collect::<Result<Vec<_>>>()?;
        t.model.params.load(model_entries)?;
        let step = state.get("adam.step")?.tensor.data().iter().map(|x| x.f64() as u64).collect::<Vec<_>>();
        if step.len() != 2 {
            return Err(invalid("malformed optimiser step entry"));
        }
        t.optimizer.step = (step[0] << 20) | step[1];
        for (name, m, v) in &mut t.optimizer.moments {
            *m = state.get(&format!("adam.m.{name}"))?.tensor.clone();
            *v = state.get(&format!("adam.v.{name}"))?.tensor.clone();
        }
        t.step = t.optimizer.step as usize;
        Ok(t)
    }
}

/// `mean |d - gt| / mean gt` over pixels valid in both maps.
pub fn normalized_error(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let mut err = 0.0;
    let mut total = 0.0;
    for i in 0..gt.values().len() {
        if gt.mask()[i] && pred.mask()[i] {
            err += (pred.values()[i] - gt.values()[i]).abs();
            total += gt.values()[i];
        }
    }
    if total == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(err / total)
}
