use std::path::{Path, PathBuf};

use serde::Deserialize;

use msim::encoder::EncoderConfig;
use msim::pooling::PoolingHead;
use msim::training::{default_learning_rate, Objective, TrainConfig};
use msim::{Error, Result};

/// Run configuration file. `vocab_size` is deliberately absent from the
/// encoder section: it always comes from the training data or, on resume,
/// from the checkpoint.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    /// Pooling head; mean pooling when omitted.
    pub head: Option<PoolingHead>,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    #[serde(default)]
    pub factorized_embedding: bool,
    #[serde(default)]
    pub share_layers: bool,
    #[serde(default = "one")]
    pub num_hidden_groups: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            factorized_embedding: self.factorized_embedding,
            share_layers: self.share_layers,
            num_hidden_groups: self.num_hidden_groups,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }
}

/// Optimization overrides. Anything omitted falls back to the task and head
/// defaults: similarity regression runs 10 epochs at batch 32, inference
/// classification 1 epoch at batch 16, with the learning rate chosen by head.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub warmup_fraction: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub shuffle: Option<bool>,
    pub seed: Option<u64>,
}

impl TrainSection {
    pub fn resolve(&self, objective: Objective, head: &PoolingHead) -> TrainConfig {
        let mut cfg = TrainConfig::new(
            self.learning_rate.unwrap_or_else(|| default_learning_rate(head)),
            self.batch_size.unwrap_or_else(|| objective.default_batch_size()),
            self.epochs.unwrap_or_else(|| objective.default_epochs()),
        );
        if let Some(w) = self.warmup_fraction {
            cfg.warmup_fraction = w;
        }
        if let Some(b) = self.beta1 {
            cfg.beta1 = b;
        }
        if let Some(b) = self.beta2 {
            cfg.beta2 = b;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(s) = self.shuffle {
            cfg.shuffle = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training corpus: similarity TSV or inference JSON lines, per task.
    pub train: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
