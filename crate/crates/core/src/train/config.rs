use alloc::string::String;

use crate::error::{bail, Result};
use crate::model::ModelConfig;

/// Optimizer, schedule and loop settings.
///
/// `tokens_per_batch` counts the tokens of one optimizer step after
/// accumulation, so each micro-batch holds
/// `tokens_per_batch / (seq_len * grad_accum_steps)` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tokens_per_batch: u64,
    pub seq_len: usize,
    pub total_steps: u64,
    pub grad_accum_steps: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    pub seed: u64,
    /// When set, `total_steps` is derived from the dataset size.
    pub epochs: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tokens_per_batch: 8192,
            seq_len: 2048,
            total_steps: 458_000,
            grad_accum_steps: 1,
            peak_lr: 6.0e-4,
            min_lr: 0.0,
            warmup_steps: 5_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            checkpoint_interval: 22_000,
            eval_interval: 100_000,
            seed: 42,
            epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            bail!(Config, "sequence length must be at least 2");
        }
        if self.grad_accum_steps == 0 {
            bail!(Config, "gradient accumulation steps must be positive");
        }
        let per_step = self.seq_len as u64 * self.grad_accum_steps;
        if self.tokens_per_batch == 0 || !self.tokens_per_batch.is_multiple_of(per_step) {
            bail!(
                Config,
                "tokens per batch {} is not a positive multiple of sequence length x accumulation = {per_step}",
                self.tokens_per_batch
            );
        }
        if self.epochs == Some(0) {
            bail!(Config, "epochs must be positive");
        }
        if self.epochs.is_none() && self.warmup_steps >= self.total_steps {
            bail!(Config, "warmup steps {} must be below total steps {}", self.warmup_steps, self.total_steps);
        }
        let reals = [
            ("learning rate", self.peak_lr),
            ("minimum learning rate", self.min_lr),
            ("adam epsilon", self.eps),
            ("weight decay", self.weight_decay),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{name} must be finite and non-negative, got {v}");
            }
        }
        if self.min_lr > self.peak_lr {
            bail!(Config, "minimum learning rate exceeds the peak");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "adam betas must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            bail!(Config, "gradient clipping norm must be positive");
        }
        Ok(())
    }

    /// Sequences per micro-batch.
    pub fn micro_batch_size(&self) -> usize {
        (self.tokens_per_batch / (self.seq_len as u64 * self.grad_accum_steps)) as usize
    }

    /// Sequences consumed by one optimizer step.
    pub fn sequences_per_step(&self) -> usize {
        self.micro_batch_size() * self.grad_accum_steps as usize
    }

    /// Tokens processed over the whole run.
    pub fn total_tokens(&self) -> u64 {
        self.total_steps * self.tokens_per_batch
    }

    /// Checkpoints written strictly before or at the last step.
    pub fn intermediate_checkpoints(&self) -> u64 {
        self.total_steps.checked_div(self.checkpoint_interval).unwrap_or(0)
    }

    /// Fixes `total_steps` from `epochs` over `n_sequences` training sequences.
    pub fn resolve_steps(&self, n_sequences: usize) -> Result<Self> {
        let mut out = self.clone();
        if let Some(epochs) = self.epochs {
            let per_epoch = (n_sequences / self.sequences_per_step()) as u64;
            if per_epoch == 0 {
                bail!(Empty, "{n_sequences} sequences do not fill one step of {}", self.sequences_per_step());
            }
            out.total_steps = per_epoch * epochs as u64;
            out.epochs = None;
        }
        out.validate()?;
        Ok(out)
    }
}

/// A named model and training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESET_NAMES: [&str; 3] = ["ttl-160m", "ttl-460m", "ttl-sft"];

pub fn preset(name: &str) -> Result<Preset> {
    let (model, train) = match name {
        "ttl-160m" => (ModelConfig::ttl_160m(), TrainConfig::default()),
        "ttl-460m" => (
            ModelConfig::ttl_460m(),
            TrainConfig {
                total_steps: 1_200_000,
                grad_accum_steps: 2,
                peak_lr: 3.0e-4,
                warmup_steps: 10_000,
                checkpoint_interval: 25_000,
                ..TrainConfig::default()
            },
        ),
        "ttl-sft" => {
            let base = preset("ttl-460m")?;
            (
                base.model,
                TrainConfig { peak_lr: 1.0e-5, warmup_steps: 1_000, epochs: Some(3), total_steps: 0, ..base.train },
            )
        }
        other => bail!(Config, "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"),
    };
    Ok(Preset { name: name.into(), model, train })
}
