//! Training configuration and its flat `key = value` file format.
//!
//! One assignment per line, `#` starts a comment, unknown keys are rejected.
//! Keys not given keep their defaults.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvId};
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveKind, ObjectiveSpec, DEFAULT_EPSILON};
use crate::optim::AdamWConfig;
use crate::trust_region::DEFAULT_TAU_M2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    pub copy_len: usize,
    pub objective: ObjectiveKind,
    pub epsilon: f64,
    pub tau_m2: f64,
    /// Staleness in model updates.
    pub k: u64,
    pub group_size: usize,
    pub batch_prompts: usize,
    /// Responses per model update.
    pub mini_batch: usize,
    pub updates_per_step: u64,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Evaluate the live policy every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_prompts: usize,
    pub eval_samples: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Log every consumed mini-batch to the rollout JSONL.
    pub dump_rollouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let opt = AdamWConfig::default();
        Self {
            env: env.env,
            vocab_size: env.vocab_size,
            max_len: env.max_len,
            num_prompts: env.num_prompts,
            copy_len: env.copy_len,
            objective: ObjectiveKind::GrpoClip,
            epsilon: DEFAULT_EPSILON,
            tau_m2: DEFAULT_TAU_M2,
            k: 0,
            group_size: 8,
            batch_prompts: 16,
            mini_batch: 32,
            updates_per_step: 4,
            steps: 300,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            temperature: 1.0,
            seed: 0,
            eval_every: 50,
            eval_prompts: 64,
            eval_samples: 4,
            checkpoint_every: 100,
            dump_rollouts: false,
        }
    }
}

const KEYS: &[&str] = &[
    "env",
    "vocab_size",
    "max_len",
    "num_prompts",
    "copy_len",
    "objective",
    "epsilon",
    "tau_m2",
    "k",
    "group_size",
    "batch_prompts",
    "mini_batch",
    "updates_per_step",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "temperature",
    "seed",
    "eval_every",
    "eval_prompts",
    "eval_samples",
    "checkpoint_every",
    "dump_rollouts",
];

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn field_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl TrainConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            env: self.env,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            num_prompts: self.num_prompts,
            copy_len: self.copy_len,
        }
    }

    pub fn objective_spec(&self) -> ObjectiveSpec {
        match self.objective {
            ObjectiveKind::GrpoClip => ObjectiveSpec::GrpoClip {
                epsilon: self.epsilon,
            },
            ObjectiveKind::NoTr => ObjectiveSpec::NoTr,
            ObjectiveKind::M2po => ObjectiveSpec::M2po {
                tau_m2: self.tau_m2,
            },
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Sets one key; `value` is the raw text from a config file or flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" => self.env = v.parse().map_err(|e: Error| field_err(key, e))?,
            "vocab_size" => self.vocab_size = parse_field(key, v)?,
            "max_len" => self.max_len = parse_field(key, v)?,
            "num_prompts" => self.num_prompts = parse_field(key, v)?,
            "copy_len" => self.copy_len = parse_field(key, v)?,
            "objective" => self.objective = v.parse().map_err(|e: Error| field_err(key, e))?,
            "epsilon" => self.epsilon = parse_field(key, v)?,
            "tau_m2" => self.tau_m2 = parse_field(key, v)?,
            "k" => self.k = parse_field(key, v)?,
            "group_size" => self.group_size = parse_field(key, v)?,
            "batch_prompts" => self.batch_prompts = parse_field(key, v)?,
            "mini_batch" => self.mini_batch = parse_field(key, v)?,
            "updates_per_step" => self.updates_per_step = parse_field(key, v)?,
            "steps" => self.steps = parse_field(key, v)?,
            "lr" => self.lr = parse_field(key, v)?,
            "beta1" => self.beta1 = parse_field(key, v)?,
            "beta2" => self.beta2 = parse_field(key, v)?,
            "weight_decay" => self.weight_decay = parse_field(key, v)?,
            "temperature" => self.temperature = parse_field(key, v)?,
            "seed" => self.seed = parse_field(key, v)?,
            "eval_every" => self.eval_every = parse_field(key, v)?,
            "eval_prompts" => self.eval_prompts = parse_field(key, v)?,
            "eval_samples" => self.eval_samples = parse_field(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_field(key, v)?,
            "dump_rollouts" => self.dump_rollouts = parse_field(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key '{other}' (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut explicit_updates = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            explicit_updates |= key == "updates_per_step";
            cfg.set(key, value)?;
        }
        if !explicit_updates {
            cfg.derive_updates_per_step();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `updates_per_step` from the batch arithmetic when it divides evenly.
    pub fn derive_updates_per_step(&mut self) {
        let responses = self.batch_prompts * self.group_size;
        if self.mini_batch > 0 && responses.is_multiple_of(self.mini_batch) {
            self.updates_per_step = (responses / self.mini_batch) as u64;
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("env", self.env.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_len", self.max_len.to_string());
        put("num_prompts", self.num_prompts.to_string());
        put("copy_len", self.copy_len.to_string());
        put("objective", self.objective.to_string());
        put("epsilon", format!("{:?}", self.epsilon));
        put("tau_m2", format!("{:?}", self.tau_m2));
        put("k", self.k.to_string());
        put("group_size", self.group_size.to_string());
        put("batch_prompts", self.batch_prompts.to_string());
        put("mini_batch", self.mini_batch.to_string());
        put("updates_per_step", self.updates_per_step.to_string());
        put("steps", self.steps.to_string());
        put("lr", format!("{:?}", self.lr));
        put("beta1", format!("{:?}", self.beta1));
        put("beta2", format!("{:?}", self.beta2));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("temperature", format!("{:?}", self.temperature));
        put("seed", self.seed.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_prompts", self.eval_prompts.to_string());
        put("eval_samples", self.eval_samples.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("dump_rollouts", self.dump_rollouts.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        crate::env::Environment::new(self.env_config())?;
        self.objective_spec().validate()?;
        if self.group_size < 2 {
            return Err(field_err(
                "group_size",
                format!("must be >= 2, got {}", self.group_size),
            ));
        }
        if self.batch_prompts == 0 || self.batch_prompts > self.num_prompts {
            return Err(field_err(
                "batch_prompts",
                format!(
                    "must be in 1..={}, got {}",
                    self.num_prompts, self.batch_prompts
                ),
            ));
        }
        let responses = self.batch_prompts * self.group_size;
        if self.mini_batch == 0 || !responses.is_multiple_of(self.mini_batch) {
            return Err(field_err(
                "mini_batch",
                format!(
                    "must divide batch_prompts*group_size (= {responses}), got {}",
                    self.mini_batch
                ),
            ));
        }
        let implied = (responses / self.mini_batch) as u64;
        if self.updates_per_step != implied {
            return Err(field_err(
                "updates_per_step",
                format!(
                    "must equal batch_prompts*group_size/mini_batch (= {implied}), got {}",
                    self.updates_per_step
                ),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(field_err(
                "lr",
                format!("must be finite and >= 0, got {}", self.lr),
            ));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field_err(key, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(field_err("weight_decay", "must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(field_err("temperature", "must be positive"));
        }
        if self.eval_prompts == 0 || self.eval_prompts > self.num_prompts {
            return Err(field_err(
                "eval_prompts",
                format!(
                    "must be in 1..={}, got {}",
                    self.num_prompts, self.eval_prompts
                ),
            ));
        }
        if self.eval_samples == 0 {
            return Err(field_err("eval_samples", "must be positive"));
        }
        Ok(())
    }
}
