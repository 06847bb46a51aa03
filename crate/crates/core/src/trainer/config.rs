use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::numerics::Precision;

/// Which stage a preset is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// The learning rate is multiplied by `lr_decay` once per this many
    /// examples seen.
    pub decay_every_examples: u64,
    pub epochs: usize,
    /// When non-zero, train for exactly this many steps and ignore `epochs`.
    pub max_steps: u64,
    pub dropout_rate: f64,
    pub l2_penalty: f64,
    /// Distillation temperature; 0 disables distillation.
    pub temperature: f64,
    pub stop_grad_teacher: bool,
    pub seed: u64,
    /// Threads used to run base models in parallel.
    pub workers: usize,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn preset(name: &str, stage: Stage) -> Result<Self> {
        let finetune = stage == Stage::Finetune;
        let mut cfg = match name {
            "full" => Self {
                batch_size: if finetune { 512 } else { 80 },
                base_lr: 0.0002,
                lr_decay: 0.8,
                decay_every_examples: 1_000_000,
                epochs: 10,
                max_steps: if finetune { 0 } else { 500_000 },
                dropout_rate: 0.5,
                l2_penalty: 1e-5,
                temperature: 0.0,
                stop_grad_teacher: false,
                seed: 0,
                workers: 1,
                precision: Precision::F32,
            },
            "desk" => Self {
                batch_size: if finetune { 64 } else { 32 },
                base_lr: 0.002,
                lr_decay: 0.8,
                decay_every_examples: 20_000,
                epochs: if finetune { 6 } else { 12 },
                max_steps: 0,
                dropout_rate: 0.5,
                l2_penalty: 1e-5,
                temperature: 0.0,
                stop_grad_teacher: false,
                seed: 0,
                workers: 1,
                precision: Precision::F32,
            },
            "tiny" => Self {
                batch_size: 16,
                base_lr: 0.005,
                lr_decay: 0.8,
                decay_every_examples: 1_000,
                epochs: 3,
                max_steps: 0,
                dropout_rate: 0.5,
                l2_penalty: 1e-5,
                temperature: 0.0,
                stop_grad_teacher: false,
                seed: 0,
                workers: 1,
                precision: Precision::F32,
            },
            other => return Err(Error::Config(format!("unknown training preset `{other}`"))),
        };
        if finetune {
            cfg.dropout_rate = 0.75;
            cfg.l2_penalty = 1e-4;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must be in (0, 1]", self.lr_decay));
        }
        if self.decay_every_examples == 0 {
            return bad("decay_every_examples must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must be in [0, 1)", self.dropout_rate));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad(format!("l2_penalty {} must be non-negative", self.l2_penalty));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be non-negative", self.temperature));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// Applies training keys from `kv`, leaving other keys in place.
    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("batch_size", &mut self.batch_size)?;
        kv.take_into("base_lr", &mut self.base_lr)?;
        kv.take_into("lr_decay", &mut self.lr_decay)?;
        kv.take_into("decay_every_examples", &mut self.decay_every_examples)?;
        kv.take_into("epochs", &mut self.epochs)?;
        kv.take_into("max_steps", &mut self.max_steps)?;
        kv.take_into("dropout_rate", &mut self.dropout_rate)?;
        kv.take_into("l2_penalty", &mut self.l2_penalty)?;
        kv.take_into("temperature", &mut self.temperature)?;
        kv.take_into("stop_grad_teacher", &mut self.stop_grad_teacher)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("workers", &mut self.workers)?;
        kv.take_into("precision", &mut self.precision)?;
        self.validate()
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("decay_every_examples", self.decay_every_examples.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("l2_penalty", self.l2_penalty.to_string()),
            ("temperature", self.temperature.to_string()),
            ("stop_grad_teacher", self.stop_grad_teacher.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("precision", self.precision.name().to_string()),
        ]
    }
}

/// Step-decayed learning rate after `examples_seen` training examples.
pub fn lr_at(examples_seen: u64, cfg: &TrainConfig) -> f64 {
    let periods = examples_seen / cfg.decay_every_examples;
    cfg.base_lr * cfg.lr_decay.powi(periods.min(i32::MAX as u64) as i32)
}
