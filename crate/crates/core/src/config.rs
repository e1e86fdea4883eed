//! Run configuration: model, training schedule, evaluation settings and output
//! location, stored as TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PriorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_samples")]
    pub samples_per_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr_initial: f64,
    #[serde(default = "d_decay")]
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays; when absent, 80 for marginal priors and
    /// 40 for conditional ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_every: Option<usize>,
    #[serde(default = "d_tau_start")]
    pub tau_start: f64,
    #[serde(default = "d_tau_end")]
    pub tau_end: f64,
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    pub noise_variance: f64,
    /// Global gradient-norm clip; off unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip_norm: Option<f64>,
}

fn d_epochs() -> usize {
    180
}
fn d_samples() -> usize {
    200_000
}
fn d_batch() -> usize {
    1000
}
fn d_lr() -> f64 {
    1e-3
}
fn d_decay() -> f64 {
    0.3
}
fn d_tau_start() -> f64 {
    1.0
}
fn d_tau_end() -> f64 {
    0.2
}

impl TrainConfig {
    pub fn new(lambda: f64, noise_variance: f64, seed: u64) -> Self {
        Self {
            epochs: d_epochs(),
            samples_per_epoch: d_samples(),
            batch_size: d_batch(),
            lr_initial: d_lr(),
            lr_decay_factor: d_decay(),
            lr_decay_every: None,
            tau_start: d_tau_start(),
            tau_end: d_tau_end(),
            lambda,
            seed,
            noise_variance,
            grad_clip_norm: None,
        }
    }

    pub fn decay_every(&self, kind: PriorKind) -> usize {
        self.lr_decay_every.unwrap_or(match kind {
            PriorKind::Marginal => 80,
            PriorKind::Conditional => 40,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::config(
                "train.batch_size",
                "batch and epoch sizes must be positive",
            ));
        }
        if self.samples_per_epoch % self.batch_size != 0 {
            return Err(Error::config(
                "train.batch_size",
                format!(
                    "{} does not divide samples_per_epoch {}",
                    self.batch_size, self.samples_per_epoch
                ),
            ));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return Err(Error::config(
                "train.tau_end",
                "need 0 < tau_end <= tau_start",
            ));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::config(
                "train.lr_initial",
                "learning rates must be positive",
            ));
        }
        if self.lr_decay_every == Some(0) {
            return Err(Error::config("train.lr_decay_every", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(
                "train.lambda",
                "must be finite and non-negative",
            ));
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::config(
                "train.noise_variance",
                "must be finite and positive",
            ));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("train.grad_clip_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_eval_samples")]
    pub samples: usize,
    #[serde(default = "d_eval_seed")]
    pub seed: u64,
    /// Samples per evaluation shard. Shards draw from their own streams, so changing
    /// this changes the evaluation samples; the thread count does not.
    #[serde(default = "d_shard")]
    pub shard_size: usize,
}

fn d_eval_samples() -> usize {
    1_000_000
}
fn d_eval_seed() -> u64 {
    0x5eed
}
fn d_shard() -> usize {
    10_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: d_eval_samples(),
            seed: d_eval_seed(),
            shard_size: d_shard(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form label such as `222`, `44` or `mono-4`.
    #[serde(default = "d_scenario")]
    pub scenario: String,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn d_scenario() -> String {
    "custom".into()
}
fn d_out_dir() -> String {
    "runs".into()
}

/// A named stage/alphabet layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Three binary stages.
    TwoTwoTwo,
    /// Two quaternary stages.
    FourFour,
    /// A single stage with `M` codes.
    Mono(usize),
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "222" => Ok(Scenario::TwoTwoTwo),
            "44" => Ok(Scenario::FourFour),
            other => match other.strip_prefix("mono-").and_then(|n| n.parse().ok()) {
                Some(m) if m >= 2 => Ok(Scenario::Mono(m)),
                _ => Err(Error::config(
                    "scenario",
                    format!("expected `222`, `44` or `mono-N` with N >= 2, got `{other}`"),
                )),
            },
        }
    }

    pub fn stages_alphabet(self) -> (usize, usize) {
        match self {
            Scenario::TwoTwoTwo => (3, 2),
            Scenario::FourFour => (2, 4),
            Scenario::Mono(m) => (1, m),
        }
    }

    pub fn label(self) -> String {
        match self {
            Scenario::TwoTwoTwo => "222".into(),
            Scenario::FourFour => "44".into(),
            Scenario::Mono(m) => format!("mono-{m}"),
        }
    }
}

/// The reduced profile used for desk-side reproduction and the acceptance suite.
pub const DESK_EPOCHS: usize = 60;
pub const DESK_SAMPLES_PER_EPOCH: usize = 50_000;
pub const DESK_EVAL_SAMPLES: usize = 1_000_000;

impl RunConfig {
    /// Full-scale training of a named scenario.
    pub fn for_scenario(
        scenario: Scenario,
        prior: PriorKind,
        lambda: f64,
        noise_variance: f64,
        seed: u64,
    ) -> Self {
        let (stages, alphabet) = scenario.stages_alphabet();
        Self {
            scenario: scenario.label(),
            out_dir: d_out_dir(),
            model: ModelConfig::new(stages, alphabet, prior),
            train: TrainConfig::new(lambda, noise_variance, seed),
            eval: EvalConfig::default(),
        }
    }

    /// Applies the desk-scale profile: fewer epochs and samples. Learning-rate decay
    /// points stay at their full-scale epochs, so a conditional run decays once and a
    /// marginal run not at all.
    pub fn desk_scale(mut self) -> Self {
        self.train.epochs = DESK_EPOCHS;
        self.train.samples_per_epoch = DESK_SAMPLES_PER_EPOCH;
        self.eval.samples = DESK_EVAL_SAMPLES;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.samples == 0 || self.eval.shard_size == 0 {
            return Err(Error::config("eval.samples", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = unknown_key(&msg).unwrap_or_else(|| "config".into());
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}
