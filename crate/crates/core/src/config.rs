//! Flat key-value run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gpgnet::{GpgConfig, GpgTrainConfig};
use crate::numerics::OptimizerKind;
use crate::proposals::{GaussianSampler, GlobalProposalConfig};
use crate::salnet::{SalnetConfig, SalnetTrainConfig};
use crate::tracker::TrackerConfig;
use crate::{Error, Result};

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Multiplier on the toy backbone width `D = 32`.
    pub width_scale: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub nodes: usize,
    pub gcn_depth: usize,
    pub single_normalization: bool,
    pub use_gcn: bool,
    pub tau: f64,
    pub sigma_xy: f64,
    pub sigma_scale: f64,
    pub scale_base: f64,
    pub min_region_area: usize,
    pub proposals_per_region: usize,
    pub max_global: usize,

    pub salnet_lr: f64,
    pub salnet_graphs_per_step: usize,
    pub salnet_iterations: usize,

    /// `adagrad`, `adam` or `sgd`.
    pub gpg_optimizer: String,
    pub gpg_lr: f64,
    pub gpg_batch: usize,
    pub gpg_epochs: usize,
    pub gpg_frames_per_sequence: usize,
    pub gpg_channels: Vec<usize>,

    pub init_positives: usize,
    pub init_negatives: usize,
    pub init_iterations: usize,
    pub update_positives: usize,
    pub update_negatives: usize,
    pub update_steps: usize,
    pub long_interval: usize,
    pub long_memory: usize,
    pub short_memory: usize,
    pub negative_memory: usize,
    pub init_lr_fc: f64,
    pub init_lr_head: f64,
    pub update_lr_fc: f64,
    pub update_lr_head: f64,
    pub local_candidates: usize,
    pub capacity: usize,
    pub attention_stride: usize,

    pub seed: Option<u64>,
    pub corpus: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let salnet = SalnetConfig::toy(32);
        let st = SalnetTrainConfig::default();
        let gt = GpgTrainConfig::default();
        let tr = TrackerConfig::default();
        Self {
            width_scale: 1.0,
            lambda: salnet.lambda,
            alpha: salnet.alpha,
            nodes: salnet.nodes,
            gcn_depth: salnet.gcn_depth,
            single_normalization: salnet.single_normalization,
            use_gcn: salnet.use_gcn,
            tau: tr.global.threshold,
            sigma_xy: tr.local_sampler.sigma_xy,
            sigma_scale: tr.local_sampler.sigma_scale,
            scale_base: tr.local_sampler.base,
            min_region_area: tr.global.min_area,
            proposals_per_region: tr.global.per_region,
            max_global: tr.global.max_global,
            salnet_lr: st.lr,
            salnet_graphs_per_step: st.graphs_per_step,
            salnet_iterations: st.iterations,
            gpg_optimizer: "adagrad".into(),
            gpg_lr: gt.lr,
            gpg_batch: gt.batch_size,
            gpg_epochs: gt.epochs,
            gpg_frames_per_sequence: gt.frames_per_sequence,
            gpg_channels: GpgConfig::toy(2).encoder_channels,
            init_positives: tr.init_positives,
            init_negatives: tr.init_negatives,
            init_iterations: tr.init_iterations,
            update_positives: tr.update_positives,
            update_negatives: tr.update_negatives,
            update_steps: tr.update_steps,
            long_interval: tr.long_interval,
            long_memory: tr.long_memory,
            short_memory: tr.short_memory,
            negative_memory: tr.negative_memory,
            init_lr_fc: tr.init_lr_fc,
            init_lr_head: tr.init_lr_head,
            update_lr_fc: tr.update_lr_fc,
            update_lr_head: tr.update_lr_head,
            local_candidates: tr.local_candidates,
            capacity: tr.capacity,
            attention_stride: tr.attention_stride,
            seed: None,
            corpus: PathBuf::from("corpus"),
        }
    }
}

/// Parses a `key=value` override; the value is read as TOML, falling back to a string.
fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Reads `path` (if any), then applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (k, v) = parse_override(item)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_scale <= 0.0 {
            return Err(Error::Config("width_scale must be positive".into()));
        }
        self.gpg_optimizer_kind()?;
        self.salnet_config().validate()?;
        self.tracker_config().validate()
    }

    /// The seed, which training and tracking require.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (--seed)".into()))
    }

    pub fn feature_dim(&self) -> usize {
        ((32.0 * self.width_scale).round() as usize).max(1)
    }

    pub fn salnet_config(&self) -> SalnetConfig {
        SalnetConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            nodes: self.nodes,
            gcn_depth: self.gcn_depth,
            single_normalization: self.single_normalization,
            use_gcn: self.use_gcn,
            ..SalnetConfig::toy(self.feature_dim())
        }
    }

    pub fn salnet_train_config(&self) -> SalnetTrainConfig {
        SalnetTrainConfig {
            iterations: self.salnet_iterations,
            graphs_per_step: self.salnet_graphs_per_step,
            lr: self.salnet_lr,
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn gpg_config(&self, vocab_size: usize) -> GpgConfig {
        GpgConfig { encoder_channels: self.gpg_channels.clone(), ..GpgConfig::toy(vocab_size) }
    }

    pub fn gpg_optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.gpg_optimizer.as_str() {
            "adagrad" => Ok(OptimizerKind::adagrad()),
            "adam" => Ok(OptimizerKind::adam()),
            "sgd" => Ok(OptimizerKind::Sgd { momentum: 0.9 }),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    pub fn gpg_train_config(&self) -> GpgTrainConfig {
        GpgTrainConfig {
            optimizer: self.gpg_optimizer_kind().unwrap_or_else(|_| OptimizerKind::adagrad()),
            lr: self.gpg_lr,
            batch_size: self.gpg_batch,
            epochs: self.gpg_epochs,
            frames_per_sequence: self.gpg_frames_per_sequence,
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        let sampler = GaussianSampler { sigma_xy: self.sigma_xy, sigma_scale: self.sigma_scale, base: self.scale_base };
        TrackerConfig {
            init_positives: self.init_positives,
            init_negatives: self.init_negatives,
            init_iterations: self.init_iterations,
            update_positives: self.update_positives,
            update_negatives: self.update_negatives,
            update_steps: self.update_steps,
            long_interval: self.long_interval,
            long_memory: self.long_memory,
            short_memory: self.short_memory,
            negative_memory: self.negative_memory,
            init_lr_fc: self.init_lr_fc,
            init_lr_head: self.init_lr_head,
            update_lr_fc: self.update_lr_fc,
            update_lr_head: self.update_lr_head,
            local_candidates: self.local_candidates,
            capacity: self.capacity,
            attention_stride: self.attention_stride,
            local_sampler: sampler,
            global: GlobalProposalConfig {
                threshold: self.tau,
                min_area: self.min_region_area,
                per_region: self.proposals_per_region,
                max_global: self.max_global,
                sampler,
            },
            ..TrackerConfig::default()
        }
    }
}
