//! Distillation training: schedule, optimizer, teacher signals, loop and evaluation.

mod eval;
mod optim;
mod teacher;
mod trainer;

pub use eval::{evaluate, response_nll, EvalReport};
pub use optim::{AdamW, LrGroup};
pub use teacher::{sample_key, Teacher};
pub use trainer::{Trainer, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer updates.
    pub steps: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr_projector_max: f64,
    pub lr_other_max: f64,
    pub lr_finetune_max: f64,
    /// Share of `steps` spent on the linear warmup.
    pub warmup_frac: f64,
    /// Decoupled weight decay on non-projector parameters.
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub stage: Stage,
    /// Write `ckpt_step{N}.akd` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            accumulation_steps: 1,
            lr_projector_max: 1e-3,
            lr_other_max: 2e-5,
            lr_finetune_max: 4e-5,
            warmup_frac: 0.03,
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::F32,
            stage: Stage::Pretrain,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).floor() as usize
    }

    /// Peak rate of the non-projector group for the configured stage.
    pub fn lr_other_for_stage(&self) -> f64 {
        match self.stage {
            Stage::Pretrain => self.lr_other_max,
            Stage::Finetune => self.lr_finetune_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be at least 1");
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return fail("warmup_frac must be in [0, 0.5]");
        }
        for lr in [self.lr_projector_max, self.lr_other_max, self.lr_finetune_max, self.weight_decay] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail("learning rates and weight_decay must be finite and nonnegative");
            }
        }
        Ok(())
    }
}

/// Linear warmup to `max_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, max_lr: f64, total_steps: usize, warmup: usize) -> Result<f64> {
    if warmup >= total_steps {
        return Err(Error::BadSchedule(format!("warmup {warmup} must be below total steps {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::BadSchedule(format!("step {step} beyond total steps {total_steps}")));
    }
    if step < warmup {
        return Ok(max_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests;
