//! Run configuration, loaded from JSON. Unknown keys are rejected at every
//! level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{CompatFlags, QuantizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_q: f64,
    pub lambda_r: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_q: 1.0,
            lambda_r: 1.0,
            lr: 5e-4,
            batch_size: 8,
            epochs: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_q < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::Config(format!(
                "regularizer weights must be non-negative, got lambda_q={} lambda_r={}",
                self.lambda_q, self.lambda_r
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "lr, batch_size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

/// Shape of the host model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub rank: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub lora_alpha: f64,
    /// When false, every quantizer is the identity.
    pub quantize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            rank: 8,
            layers: 2,
            d_ff: 64,
            lora_alpha: 16.0,
            quantize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SequenceClassification,
    LowRankRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seeds the data and the frozen "pretrained" weights, independent of
    /// the training seed.
    pub seed: u64,
    /// Rank of the planted update in the regression teacher.
    pub teacher_rank: usize,
    /// Standard deviation of additive target noise for regression.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::SequenceClassification,
            vocab: 64,
            seq_len: 16,
            classes: 2,
            n_train: 256,
            n_eval: 1000,
            seed: 1234,
            teacher_rank: 2,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub quantizer: QuantizerConfig,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub compat: CompatFlags,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            quantizer: QuantizerConfig::default(),
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            compat: CompatFlags::default(),
            seeds: vec![0, 1, 2],
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.quantizer.validate()?;
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide hidden size {}",
                m.heads, m.d
            )));
        }
        if m.rank == 0 || m.layers == 0 || m.d_ff == 0 {
            return Err(Error::Config("rank, layers and d_ff must be positive".into()));
        }
        let t = &self.task;
        if t.kind == TaskKind::SequenceClassification && (t.vocab < 2 || t.seq_len < 4 || t.classes != 2) {
            return Err(Error::Config(
                "classification needs vocab >= 2, seq_len >= 4 and exactly 2 classes".into(),
            ));
        }
        if t.n_train < self.train.batch_size || t.n_eval == 0 {
            return Err(Error::Config(format!(
                "n_train ({}) must cover one batch of {} and n_eval must be positive",
                t.n_train, self.train.batch_size
            )));
        }
        if t.teacher_rank > m.d {
            return Err(Error::Config("teacher_rank exceeds hidden size".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Quantizer settings with the compatibility flags folded in.
    pub fn quantizer_config(&self) -> QuantizerConfig {
        QuantizerConfig {
            compat: self.compat,
            ..self.quantizer.clone()
        }
    }
}
