//! Run configuration file shared by the `pretrain` and `finetune` commands.

use pcp_core::optim::AdamWConfig;
use pcp_core::pipeline::{FinetuneConfig, PretrainConfig, FINETUNE_LR_GRID};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ModelSpec;

pub const DEFAULT_SEED: u64 = 42;

/// Flat JSON document; every key is optional and defaults to the values used
/// for few-shot fine-tuning and continued pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub steps: u64,
    pub eval_interval: u64,
    pub epochs: u64,
    /// Unset means 8 for fine-tuning and 32 for pre-training.
    pub batch_size: Option<usize>,
    /// A single learning rate. Unset: fine-tuning searches `lr_grid`,
    /// pre-training uses 1e-4.
    pub lr: Option<f64>,
    pub lr_grid: Vec<f64>,
    pub max_sequence_length: usize,
    pub masking_probability: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub seed: Option<u64>,
    /// Architecture for `--init random`.
    pub model: ModelSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ft = FinetuneConfig::default();
        let pt = PretrainConfig::default();
        let adam = AdamWConfig::default();
        Self {
            steps: ft.steps,
            eval_interval: ft.eval_interval,
            epochs: pt.epochs,
            batch_size: None,
            lr: None,
            lr_grid: FINETUNE_LR_GRID.to_vec(),
            max_sequence_length: ft.max_sequence_length,
            masking_probability: pt.masking_probability,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            warmup_proportion: adam.warmup_proportion,
            seed: None,
            model: ModelSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.lr.is_some_and(|lr| !positive(lr)) || self.lr_grid.iter().any(|lr| !positive(*lr)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr.is_none() && self.lr_grid.is_empty() {
            return Err(Error::Config("set `lr` or a non-empty `lr_grid`".into()));
        }
        if self.batch_size == Some(0) || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.masking_probability) {
            return Err(Error::Config("masking_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `--seed` if given, else the file's seed, else 42.
    pub fn resolve_seed(&self, cli: Option<u64>) -> u64 {
        cli.or(self.seed).unwrap_or(DEFAULT_SEED)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            warmup_proportion: self.warmup_proportion,
        }
    }

    /// Fine-tuning settings and the learning rates to try.
    pub fn finetune(&self, seed: u64) -> (FinetuneConfig, Vec<f64>) {
        let grid = match self.lr {
            Some(lr) => vec![lr],
            None => self.lr_grid.clone(),
        };
        let cfg = FinetuneConfig {
            steps: self.steps,
            eval_interval: self.eval_interval,
            batch_size: self.batch_size.unwrap_or(FinetuneConfig::default().batch_size),
            learning_rate: grid[0],
            max_sequence_length: self.max_sequence_length,
            optimizer: self.optimizer(),
            seed,
        };
        (cfg, grid)
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        let d = PretrainConfig::default();
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            masking_probability: self.masking_probability,
            max_sequence_length: self.max_sequence_length,
            optimizer: self.optimizer(),
            seed,
            unlabelled_cap: d.unlabelled_cap,
        }
    }
}
