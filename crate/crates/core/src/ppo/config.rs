//! Training hyperparameters and their flat `key = value` file format.

use std::fmt;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticMode {
    /// Value head reads the same ternary latents as the policy.
    Ternary,
    /// Value head reads latents from the full-precision twin encoder.
    Fp32,
    /// `k` value heads on ternary latents; prediction is their mean.
    Ensemble(usize),
}

impl CriticMode {
    pub fn members(self) -> usize {
        match self {
            CriticMode::Ensemble(k) => k,
            _ => 1,
        }
    }
}

impl fmt::Display for CriticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CriticMode::Ternary => f.write_str("ternary"),
            CriticMode::Fp32 => f.write_str("fp32"),
            CriticMode::Ensemble(k) => write!(f, "ensemble{k}"),
        }
    }
}

impl FromStr for CriticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ternary" => Ok(CriticMode::Ternary),
            "fp32" => Ok(CriticMode::Fp32),
            _ => match s
                .strip_prefix("ensemble")
                .and_then(|k| k.parse::<usize>().ok())
            {
                Some(k @ (1 | 3 | 5)) => Ok(CriticMode::Ensemble(k)),
                _ => Err(Error::Config(format!(
                    "critic mode `{s}` is not one of ternary, fp32, ensemble1, ensemble3, ensemble5"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub policy_lr: f64,
    pub value_lr: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub rollout_length: usize,
    /// Global-norm clip per head; `<= 0` disables clipping.
    pub grad_clip: f64,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub critic_mode: CriticMode,
    pub backbone: BackboneConfig,
}

pub const VALUE_COEF: f64 = 0.5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy_lr: 3e-4,
            value_lr: 1e-3,
            clip_epsilon: 0.1,
            entropy_coef: 0.05,
            gamma: 0.99,
            gae_lambda: 0.95,
            minibatch: 64,
            epochs: 4,
            rollout_length: 2048,
            grad_clip: 0.5,
            total_steps: 500_000,
            eval_every: 50_000,
            eval_episodes: 20,
            seed: 0,
            critic_mode: CriticMode::Ternary,
            backbone: BackboneConfig::small(),
        }
    }
}

/// Keys accepted in config files, in canonical order.
pub const CONFIG_KEYS: [&str; 19] = [
    "policy_lr",
    "value_lr",
    "clip_epsilon",
    "entropy_coef",
    "gamma",
    "gae_lambda",
    "minibatch",
    "epochs",
    "rollout_length",
    "grad_clip",
    "total_steps",
    "eval_every",
    "eval_episodes",
    "seed",
    "critic_mode",
    "backbone_layers",
    "backbone_dim",
    "backbone_heads",
    "backbone_ffn",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.policy_lr > 0.0 && self.value_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.entropy_coef < 0.0 || !self.entropy_coef.is_finite() {
            return bad("entropy_coef must be non-negative");
        }
        if self.minibatch == 0 || self.epochs == 0 || self.rollout_length == 0 {
            return bad("minibatch, epochs and rollout_length must be positive");
        }
        if self.minibatch > self.rollout_length {
            return bad("minibatch cannot exceed rollout_length");
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("total_steps, eval_every and eval_episodes must be positive");
        }
        self.backbone
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "policy_lr" => self.policy_lr = parse(key, value)?,
            "value_lr" => self.value_lr = parse(key, value)?,
            "clip_epsilon" => self.clip_epsilon = parse(key, value)?,
            "entropy_coef" => self.entropy_coef = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "gae_lambda" => self.gae_lambda = parse(key, value)?,
            "minibatch" => self.minibatch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "rollout_length" => self.rollout_length = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "critic_mode" => self.critic_mode = value.parse()?,
            "backbone_layers" => self.backbone.layers = parse(key, value)?,
            "backbone_dim" => self.backbone.d_model = parse(key, value)?,
            "backbone_heads" => self.backbone.heads = parse(key, value)?,
            "backbone_ffn" => self.backbone.ffn_dim = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of one field.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "policy_lr" => self.policy_lr.to_string(),
            "value_lr" => self.value_lr.to_string(),
            "clip_epsilon" => self.clip_epsilon.to_string(),
            "entropy_coef" => self.entropy_coef.to_string(),
            "gamma" => self.gamma.to_string(),
            "gae_lambda" => self.gae_lambda.to_string(),
            "minibatch" => self.minibatch.to_string(),
            "epochs" => self.epochs.to_string(),
            "rollout_length" => self.rollout_length.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "seed" => self.seed.to_string(),
            "critic_mode" => self.critic_mode.to_string(),
            "backbone_layers" => self.backbone.layers.to_string(),
            "backbone_dim" => self.backbone.d_model.to_string(),
            "backbone_heads" => self.backbone.heads.to_string(),
            "backbone_ffn" => self.backbone.ffn_dim.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Parses `key = value` lines over the defaults.
    ///
    /// Blank lines and `#` comments are ignored. Returns the config and the
    /// keys that were left at their defaults.
    pub fn parse(text: &str) -> Result<(Self, Vec<&'static str>)> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            cfg.set(key, v.trim())?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        let defaulted = CONFIG_KEYS
            .iter()
            .copied()
            .filter(|k| !seen.iter().any(|s| s == k))
            .collect();
        Ok((cfg, defaulted))
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!((c.policy_lr, c.value_lr), (3e-4, 1e-3));
        assert_eq!((c.clip_epsilon, c.entropy_coef), (0.1, 0.05));
        assert_eq!((c.gamma, c.gae_lambda), (0.99, 0.95));
        assert_eq!((c.minibatch, c.epochs, c.rollout_length), (64, 4, 2048));
        assert_eq!(c.grad_clip, 0.5);
        assert_eq!(c.eval_every, 50_000);
        c.validate().unwrap();
    }

    #[test]
    fn parse_fills_defaults_and_rejects_unknown_keys() {
        let (c, defaulted) =
            TrainConfig::parse("# comment\nclip_epsilon = 0.2\n\ncritic_mode = ensemble3\n")
                .unwrap();
        assert_eq!(c.clip_epsilon, 0.2);
        assert_eq!(c.critic_mode, CriticMode::Ensemble(3));
        assert!(defaulted.contains(&"policy_lr") && !defaulted.contains(&"clip_epsilon"));
        assert!(TrainConfig::parse("learning_rate = 1").is_err());
        assert!(TrainConfig::parse("gamma = 1.0").is_err());
        assert!(TrainConfig::parse("gamma").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("critic_mode = ensemble4").is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = TrainConfig::default();
        c.grad_clip = 0.0;
        c.critic_mode = CriticMode::Fp32;
        c.seed = 17;
        let (back, defaulted) = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(defaulted.is_empty());
    }
}
