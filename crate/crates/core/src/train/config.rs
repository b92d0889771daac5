use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decode::{check_threshold, LabelMode};
use crate::error::{Error, Result};
use crate::metrics::Flatness;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Flat training configuration. Every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub cnn_blocks: usize,
    pub kernel_size: usize,
    /// Span feature width `r`.
    pub cnn_channels: usize,
    pub heads: usize,
    pub hidden_size: usize,
    pub warmup_factor: f64,
    pub length_embed_dim: usize,
    pub max_offset: usize,
    pub seed: u64,
    pub precision: Precision,
    pub threshold: f64,

    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Inverted dropout on the encoder output; 0 disables it.
    pub dropout: f64,
    /// Global gradient-norm cap; 0 disables it.
    pub grad_clip: f64,
    /// Longest training sentence accepted at load.
    pub max_len: usize,
    /// Start the output layer at zero.
    pub zero_head: bool,
    pub label_mode: LabelMode,
    pub flatness: Flatness,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 2e-3,
            batch_size: 16,
            cnn_blocks: 2,
            kernel_size: 3,
            cnn_channels: 32,
            heads: 2,
            hidden_size: 64,
            warmup_factor: 0.1,
            length_embed_dim: 16,
            max_offset: 64,
            seed: 0,
            precision: Precision::F32,
            threshold: 0.5,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_kernel: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.0,
            grad_clip: 0.0,
            max_len: 128,
            zero_head: false,
            label_mode: LabelMode::MultiLabel,
            flatness: Flatness::OwnSet,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_factor) {
            return err(format!("warmup_factor {} must lie in [0, 1)", self.warmup_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return err("eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        check_threshold(self.threshold)?;
        self.model_config(1, 0).validate()
    }

    /// Architecture for a corpus with `num_types` types and `vocab_size`
    /// known tokens.
    pub fn model_config(&self, num_types: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder_dim: self.encoder_dim,
            hidden_size: self.hidden_size,
            biaffine_size: self.cnn_channels,
            num_heads: self.heads,
            length_embed_dim: self.length_embed_dim,
            max_offset: self.max_offset,
            cnn_blocks: self.cnn_blocks,
            kernel_size: self.kernel_size,
            num_types,
            vocab_size,
            encoder_layers: self.encoder_layers,
            encoder_kernel: self.encoder_kernel,
            ..ModelConfig::default()
        }
    }
}
