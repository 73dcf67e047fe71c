//! Training configuration and its flat `key = value` text form.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Keys
//! not listed in [`TrainConfig::KEYS`] are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::env::EnvKind;
use crate::flow::FlowConfig;
use crate::net::{AdamWConfig, ScheduleMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("{}unknown key {key:?}", at(*line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("{}bad value {value:?} for {key}: {reason}", at(*line))]
    BadValue {
        key: String,
        value: String,
        reason: String,
        line: Option<usize>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Rfo,
    ShacGaussian,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Rfo => "rfo",
            Algo::ShacGaussian => "shac-gaussian",
        }
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rfo" => Ok(Algo::Rfo),
            "shac-gaussian" | "shac" => Ok(Algo::ShacGaussian),
            _ => Err("expected rfo or shac-gaussian".into()),
        }
    }
}

/// How the value at an in-segment episode boundary is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalBootstrap {
    /// Bootstrap 0 (the episode really ended).
    Zero,
    /// Bootstrap through to the freshly reset state.
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub n_envs: usize,
    pub episode_len: usize,
    pub horizon: usize,
    pub flow_steps: usize,
    pub chunk: usize,
    pub clamp: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub critic_epochs: usize,
    pub critic_minibatches: usize,
    pub actor_epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_schedule: ScheduleMode,
    pub critic_schedule: ScheduleMode,
    pub c_past: f64,
    pub c_uni: f64,
    pub clip_norm: f64,
    pub iterations: usize,
    pub seed: u64,
    pub algo: Algo,
    pub normalize: bool,
    pub eval_episodes: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub tanh_targets: bool,
    /// CFM minibatch size; 0 means `n_envs * horizon`.
    pub cfm_batch: usize,
    pub terminal_bootstrap: TerminalBootstrap,
    /// Route single-action policies through the chunk executor.
    pub chunk_executor: bool,
    pub diagnostics: bool,
    pub kl_pairs: usize,
    pub kl_draws: usize,
    pub crn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::PointMass,
            n_envs: 16,
            episode_len: 100,
            horizon: 32,
            flow_steps: 4,
            chunk: 1,
            clamp: 3.0,
            gamma: 0.99,
            lambda: 0.95,
            critic_epochs: 16,
            critic_minibatches: 4,
            actor_epochs: 1,
            actor_lr: 2e-3,
            critic_lr: 5e-4,
            actor_schedule: ScheduleMode::Linear,
            critic_schedule: ScheduleMode::Linear,
            c_past: 0.2,
            c_uni: 0.2,
            clip_norm: 1.0,
            iterations: 300,
            seed: 0,
            algo: Algo::Rfo,
            normalize: true,
            eval_episodes: 128,
            eval_interval: 25,
            checkpoint_interval: 50,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tanh_targets: false,
            cfm_batch: 0,
            terminal_bootstrap: TerminalBootstrap::Zero,
            chunk_executor: false,
            diagnostics: false,
            kl_pairs: 128,
            kl_draws: 256,
            crn: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
        line: None,
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|p| parse::<usize>(key, p.trim())).collect()
}

fn parse_schedule(key: &str, value: &str) -> Result<ScheduleMode, ConfigError> {
    match value {
        "linear" => Ok(ScheduleMode::Linear),
        "constant" => Ok(ScheduleMode::Constant),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected linear or constant".into(),
            line: None,
        }),
    }
}

fn schedule_name(m: ScheduleMode) -> &'static str {
    match m {
        ScheduleMode::Linear => "linear",
        ScheduleMode::Constant => "constant",
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "n_envs",
        "episode_len",
        "horizon",
        "flow_steps",
        "chunk",
        "clamp",
        "gamma",
        "lambda",
        "critic_epochs",
        "critic_minibatches",
        "actor_epochs",
        "actor_lr",
        "critic_lr",
        "actor_schedule",
        "critic_schedule",
        "c_past",
        "c_uni",
        "clip_norm",
        "iterations",
        "seed",
        "algo",
        "normalize",
        "eval_episodes",
        "eval_interval",
        "checkpoint_interval",
        "actor_hidden",
        "critic_hidden",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "tanh_targets",
        "cfm_batch",
        "terminal_bootstrap",
        "chunk_executor",
        "diagnostics",
        "kl_pairs",
        "kl_draws",
        "crn",
    ];

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "env" => self.env = parse(key, v)?,
            "n_envs" => self.n_envs = parse(key, v)?,
            "episode_len" => self.episode_len = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "flow_steps" | "K" => self.flow_steps = parse(key, v)?,
            "chunk" | "C" => self.chunk = parse(key, v)?,
            "clamp" => self.clamp = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "critic_epochs" => self.critic_epochs = parse(key, v)?,
            "critic_minibatches" => self.critic_minibatches = parse(key, v)?,
            "actor_epochs" => self.actor_epochs = parse(key, v)?,
            "actor_lr" => self.actor_lr = parse(key, v)?,
            "critic_lr" => self.critic_lr = parse(key, v)?,
            "actor_schedule" => self.actor_schedule = parse_schedule(key, v)?,
            "critic_schedule" => self.critic_schedule = parse_schedule(key, v)?,
            "c_past" => self.c_past = parse(key, v)?,
            "c_uni" => self.c_uni = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "algo" => self.algo = parse(key, v)?,
            "normalize" => self.normalize = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "actor_hidden" => self.actor_hidden = parse_list(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_list(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "tanh_targets" => self.tanh_targets = parse(key, v)?,
            "cfm_batch" => self.cfm_batch = parse(key, v)?,
            "terminal_bootstrap" => {
                self.terminal_bootstrap = match v {
                    "zero" => TerminalBootstrap::Zero,
                    "value" => TerminalBootstrap::Value,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected zero or value".into(),
                            line: None,
                        })
                    }
                }
            }
            "chunk_executor" => self.chunk_executor = parse(key, v)?,
            "diagnostics" => self.diagnostics = parse(key, v)?,
            "kl_pairs" => self.kl_pairs = parse(key, v)?,
            "kl_draws" => self.kl_draws = parse(key, v)?,
            "crn" => self.crn = parse(key, v)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    key: other.to_string(),
                    line: None,
                })
            }
        }
        Ok(())
    }

    /// Applies `text` on top of `self`; errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(i + 1) },
                ConfigError::BadValue { key, value, reason, .. } => ConfigError::BadValue {
                    key,
                    value,
                    reason,
                    line: Some(i + 1),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`, then validated.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key with its resolved value, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "env" => self.env.name().to_string(),
            "n_envs" => self.n_envs.to_string(),
            "episode_len" => self.episode_len.to_string(),
            "horizon" => self.horizon.to_string(),
            "flow_steps" | "K" => self.flow_steps.to_string(),
            "chunk" | "C" => self.chunk.to_string(),
            "clamp" => self.clamp.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda" => self.lambda.to_string(),
            "critic_epochs" => self.critic_epochs.to_string(),
            "critic_minibatches" => self.critic_minibatches.to_string(),
            "actor_epochs" => self.actor_epochs.to_string(),
            "actor_lr" => self.actor_lr.to_string(),
            "critic_lr" => self.critic_lr.to_string(),
            "actor_schedule" => schedule_name(self.actor_schedule).to_string(),
            "critic_schedule" => schedule_name(self.critic_schedule).to_string(),
            "c_past" => self.c_past.to_string(),
            "c_uni" => self.c_uni.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "iterations" => self.iterations.to_string(),
            "seed" => self.seed.to_string(),
            "algo" => self.algo.name().to_string(),
            "normalize" => self.normalize.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "actor_hidden" => list(&self.actor_hidden),
            "critic_hidden" => list(&self.critic_hidden),
            "weight_decay" => self.weight_decay.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "tanh_targets" => self.tanh_targets.to_string(),
            "cfm_batch" => self.cfm_batch.to_string(),
            "terminal_bootstrap" => match self.terminal_bootstrap {
                TerminalBootstrap::Zero => "zero".into(),
                TerminalBootstrap::Value => "value".into(),
            },
            "chunk_executor" => self.chunk_executor.to_string(),
            "diagnostics" => self.diagnostics.to_string(),
            "kl_pairs" => self.kl_pairs.to_string(),
            "kl_draws" => self.kl_draws.to_string(),
            "crn" => self.crn.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n_envs == 0 {
            return bad("n_envs must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be at least 1");
        }
        if self.flow_steps == 0 || self.chunk == 0 {
            return bad("flow_steps and chunk must be at least 1");
        }
        if !(self.clamp > 0.0) {
            return bad("clamp must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("c_past", self.c_past),
            ("c_uni", self.c_uni),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.actor_epochs == 0 || self.critic_minibatches == 0 {
            return bad("actor_epochs and critic_minibatches must be at least 1");
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return bad("hidden layer lists must not be empty");
        }
        if self.algo == Algo::ShacGaussian && self.chunk != 1 {
            return bad("the Gaussian baseline needs chunk = 1");
        }
        if self.diagnostics && (self.kl_pairs == 0 || self.kl_draws == 0) {
            return bad("kl_pairs and kl_draws must be at least 1");
        }
        Ok(())
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            steps: self.flow_steps,
            clamp: self.clamp,
            chunk: self.chunk,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn cfm_batch_size(&self) -> usize {
        if self.cfm_batch == 0 {
            self.n_envs * self.horizon
        } else {
            self.cfm_batch
        }
    }
}
