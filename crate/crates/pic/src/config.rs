//! Run configuration: JSON file, all keys optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pic_core::taskgen::Task;
use pic_core::train::{AdamW, LossKind, LossScope, Schedule, TrainOptions};
use pic_core::{ModelConfig, Sampling, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PIC_SEED";

/// Transformer sizes. Defaults are the full-size architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub merge_block: usize,
    pub mlp_ratio: usize,
    pub embed_hidden: usize,
    pub pos_hidden: usize,
    pub role_embedding: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::from_config(&ModelConfig::full(Variant::Sep))
    }
}

impl ModelDims {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            dim: c.dim,
            enc_depth: c.enc_depth,
            dec_depth: c.dec_depth,
            heads: c.heads,
            merge_block: c.merge_block,
            mlp_ratio: c.mlp_ratio,
            embed_hidden: c.embed_hidden,
            pos_hidden: c.pos_hidden,
            role_embedding: c.role_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        Self {
            lr: 1e-3,
            weight_decay: adam.weight_decay,
            epochs: 300,
            batch_size: 8,
            warmup_frac: 0.05,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: Vec<Task>,
    /// Level draws per (source, task); segmentation always gets one.
    pub levels_per_source: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub codebook_size: usize,
    /// Jitter/rotate/scale training-split sources before task generation.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            levels_per_source: 1,
            val_fraction: 0.1,
            test_fraction: 0.1,
            codebook_size: 50,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_points: usize,
    pub n_patches: usize,
    pub patch_size: usize,
    pub variant: Variant,
    /// Defaults to 0.7 for sep and 0.6 for cat.
    pub mask_ratio: Option<f64>,
    pub model: ModelDims,
    pub sampling: Sampling,
    pub optimizer: OptimConfig,
    pub loss: LossKind,
    pub loss_scope: LossScope,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub seed: Option<u64>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            n_patches: 64,
            patch_size: 32,
            variant: Variant::Sep,
            mask_ratio: None,
            model: ModelDims::default(),
            sampling: Sampling::Fps,
            optimizer: OptimConfig::default(),
            loss: LossKind::L2,
            loss_scope: LossScope::AllMasked,
            checkpoint_every: 50,
            data: DataConfig::default(),
            seed: None,
            paths: Paths::default(),
        }
    }
}

/// Parses a config; an empty or whitespace-only text yields the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    Ok(serde_json::from_str(text)?)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

impl RunConfig {
    /// Fills every optional value. Seed precedence: `cli_seed`, then the
    /// file, then `PIC_SEED`, then 0.
    pub fn resolve(mut self, cli_seed: Option<u64>) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(s.trim().parse::<u64>().with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?),
            Err(_) => None,
        };
        self.seed = Some(cli_seed.or(self.seed).or(env_seed).unwrap_or(0));
        self.mask_ratio = Some(self.mask_ratio.unwrap_or(self.variant.default_mask_ratio()));
        self.model_config().validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = &self.model;
        ModelConfig {
            variant: self.variant,
            dim: d.dim,
            enc_depth: d.enc_depth,
            dec_depth: d.dec_depth,
            heads: d.heads,
            merge_block: d.merge_block,
            mlp_ratio: d.mlp_ratio,
            embed_hidden: d.embed_hidden,
            pos_hidden: d.pos_hidden,
            n_patches: self.n_patches,
            patch_size: self.patch_size,
            mask_ratio: self.mask_ratio.unwrap_or(self.variant.default_mask_ratio()),
            role_embedding: d.role_embedding,
        }
    }

    pub fn train_options(&self, total_steps: u64) -> TrainOptions {
        let o = &self.optimizer;
        TrainOptions {
            schedule: Schedule { base_lr: o.lr, warmup_frac: o.warmup_frac, total_steps },
            optimizer: AdamW { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay },
            loss: self.loss,
            scope: self.loss_scope,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
