//! One flat, validated run configuration with `key=value` overrides.

use std::path::Path;

use epiflow_core::fusion::{EvalConfig, FilterConfig, NeighborSearch};
use epiflow_core::training::TrainConfig;
use epiflow_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    pub stem_channels: usize,
    pub fine_channels: usize,
    pub coarse_channels: usize,
    pub context_channels: usize,
    pub instance_norm: bool,
    pub samples: usize,
    pub pyramid_levels: usize,
    pub hidden_channels: usize,
    pub disparity_channels: usize,
    pub posenc_bands: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    pub use_pose_embedding: bool,
    pub use_uncertainty_hidden: bool,
    pub squared_translation: bool,

    pub gamma: f64,
    pub reverse_discount: bool,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub halve_every: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,

    pub reprojection_px: f64,
    pub relative_depth: f64,
    pub min_views: usize,
    pub voxel: f64,
    pub outlier_cap: f64,
    pub tau: f64,
    pub brute_force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let t = TrainConfig::default();
        let f = FilterConfig::default();
        let e = EvalConfig::default();
        Self {
            seed: 0,
            precision: Precision::F32,
            stem_channels: m.stem_channels,
            fine_channels: m.fine_channels,
            coarse_channels: m.coarse_channels,
            context_channels: m.context_channels,
            instance_norm: m.instance_norm,
            samples: m.samples,
            pyramid_levels: m.pyramid_levels,
            hidden_channels: m.hidden_channels,
            disparity_channels: m.disparity_channels,
            posenc_bands: m.posenc_bands,
            attention_dim: m.attention_dim,
            heads: m.heads,
            blocks: m.blocks,
            coarse_iters: m.coarse_iters,
            fine_iters: m.fine_iters,
            use_pose_embedding: m.use_pose_embedding,
            use_uncertainty_hidden: m.use_uncertainty_hidden,
            squared_translation: m.squared_translation,
            gamma: t.gamma,
            reverse_discount: t.reverse_discount,
            lr: t.lr,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            halve_every: t.halve_every,
            batch: t.batch,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            train_scenes: 3,
            val_scenes: 2,
            reprojection_px: f.reprojection_px,
            relative_depth: f.relative_depth,
            min_views: f.min_views,
            voxel: 0.0,
            outlier_cap: e.outlier_cap,
            tau: e.tau,
            brute_force: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// Parses an override value as a TOML scalar, falling back to a string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// File contents (if any) with `key=value` overrides applied on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| bad(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| bad(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), override_value(v.trim()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain record")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            stem_channels: self.stem_channels,
            fine_channels: self.fine_channels,
            coarse_channels: self.coarse_channels,
            context_channels: self.context_channels,
            instance_norm: self.instance_norm,
            samples: self.samples,
            pyramid_levels: self.pyramid_levels,
            hidden_channels: self.hidden_channels,
            disparity_channels: self.disparity_channels,
            posenc_bands: self.posenc_bands,
            attention_dim: self.attention_dim,
            heads: self.heads,
            blocks: self.blocks,
            coarse_iters: self.coarse_iters,
            fine_iters: self.fine_iters,
            use_pose_embedding: self.use_pose_embedding,
            use_uncertainty_hidden: self.use_uncertainty_hidden,
            squared_translation: self.squared_translation,
            seed: self.seed,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            reverse_discount: self.reverse_discount,
            lr: self.lr,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            halve_every: self.halve_every,
            batch: self.batch,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            reprojection_px: self.reprojection_px,
            relative_depth: self.relative_depth,
            min_views: self.min_views,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            outlier_cap: self.outlier_cap,
            tau: self.tau,
            search: if self.brute_force {
                NeighborSearch::BruteForce
            } else {
                NeighborSearch::KdTree
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.training().validate()?;
        if self.train_scenes == 0 {
            return Err(bad("train_scenes must be positive"));
        }
        if !(self.reprojection_px > 0.0 && self.relative_depth > 0.0) {
            return Err(bad("filter thresholds must be positive"));
        }
        if !(self.voxel >= 0.0 && self.outlier_cap > 0.0 && self.tau > 0.0) {
            return Err(bad("voxel must be non-negative, outlier_cap and tau positive"));
        }
        Ok(())
    }
}
