//! Named verification suites with JSON reports.

use serde::Serialize;
use serde_json::{json, Value};

use crate::backbone::{build_backbone, BackboneConfig, MAX_TOKENS};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::rng::RngStream;

use super::entropy::{measure_entropy_delta, DEFAULT_STATES, MIN_SEEDS};
use super::gradient_bias::measure_gradient_bias;
use super::repr_bound::{verify_repr_bound, MIN_INPUTS};
use super::value_amp::{verify_value_amplification, ValueAmpConfig, DEFAULT_GAMMAS};

pub const SUITES: [&str; 4] = ["lemma1", "thm1", "thm2", "entropy"];

/// Seeds whose value gap must be monotone, out of [`THM2_SEEDS`].
pub const THM2_REQUIRED: usize = 4;
pub const THM2_SEEDS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub summary: Value,
    pub details: Value,
}

/// Sizes of a suite run; `full` is the acceptance configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteScale {
    pub encoders: u64,
    pub inputs: usize,
    pub triples: u64,
    pub batch: usize,
    pub value: ValueAmpConfig,
    pub entropy_seeds: u64,
    pub entropy_states: usize,
    pub entropy_backbone: BackboneConfig,
}

impl SuiteScale {
    pub fn full() -> Self {
        Self {
            encoders: 100,
            inputs: 100,
            triples: 20,
            batch: 64,
            value: ValueAmpConfig::default(),
            entropy_seeds: 20,
            entropy_states: DEFAULT_STATES,
            entropy_backbone: BackboneConfig::default(),
        }
    }

    /// Minimal sizes that still satisfy every precondition.
    pub fn quick() -> Self {
        Self {
            encoders: 2,
            inputs: MIN_INPUTS,
            triples: 2,
            batch: 8,
            value: ValueAmpConfig {
                transitions: 300,
                heldout: 50,
                ..ValueAmpConfig::default()
            },
            entropy_seeds: MIN_SEEDS as u64,
            entropy_states: 4,
            entropy_backbone: BackboneConfig::small(),
        }
    }
}

fn random_tokens(vocab: usize, rng: &mut RngStream) -> Vec<u32> {
    let len = 4 + rng.below(MAX_TOKENS - 3);
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

pub fn lemma1(scale: &SuiteScale) -> Result<SuiteReport> {
    let mut details = Vec::new();
    let mut held = 0;
    let mut worst: f64 = f64::INFINITY;
    for seed in 0..scale.encoders {
        let (model, shadow) =
            build_backbone(&BackboneConfig::small(), &mut RngStream::new(seed, 101))?;
        let mut rng = RngStream::new(seed, 102);
        let inputs: Vec<Vec<u32>> = (0..scale.inputs)
            .map(|_| random_tokens(shadow.vocab().len(), &mut rng))
            .collect();
        let r = verify_repr_bound(&model, &shadow, &inputs)?;
        if r.result.holds {
            held += 1;
        }
        worst = worst.min(r.result.slack_ratio);
        details.push(json!({"seed": seed, "report": r}));
    }
    Ok(SuiteReport {
        suite: "lemma1".into(),
        passed: held == scale.encoders,
        summary: json!({"encoders": scale.encoders, "inputs": scale.inputs, "holds": held, "min_slack_ratio": worst}),
        details: Value::Array(details),
    })
}

pub fn thm1(scale: &SuiteScale) -> Result<SuiteReport> {
    let mut details = Vec::new();
    let mut held = 0;
    for seed in 0..scale.triples {
        let (model, shadow) =
            build_backbone(&BackboneConfig::small(), &mut RngStream::new(seed, 201))?;
        let mut rng = RngStream::new(seed, 202);
        let actions_n = 2 + rng.below(3);
        let mut head = HeadParams::policy(shadow.d_model(), actions_n, &mut rng)?;
        // a trained-looking output layer rather than the near-uniform init
        let gain = 10f64.powf(rng.uniform_range(0.0, 2.0));
        for w in head.weights[2].data_mut() {
            *w *= gain;
        }
        let batch: Vec<Vec<u32>> = (0..scale.batch)
            .map(|_| random_tokens(shadow.vocab().len(), &mut rng))
            .collect();
        let actions: Vec<usize> = (0..scale.batch).map(|_| rng.below(actions_n)).collect();
        let adv: Vec<f64> = (0..scale.batch).map(|_| rng.normal()).collect();
        let r = measure_gradient_bias(&head, &model, &shadow, &batch, &actions, &adv, 0.01)?;
        if r.result.holds {
            held += 1;
        }
        details.push(json!({"seed": seed, "actions": actions_n, "report": r}));
    }
    Ok(SuiteReport {
        suite: "thm1".into(),
        passed: held == scale.triples,
        summary: json!({"triples": scale.triples, "holds": held}),
        details: Value::Array(details),
    })
}

pub fn thm2(scale: &SuiteScale) -> Result<SuiteReport> {
    let mut details = Vec::new();
    let (mut monotone, mut band, mut baseline) = (0, 0, 0);
    for seed in 0..THM2_SEEDS {
        let r = verify_value_amplification(EnvId::CartPole, &DEFAULT_GAMMAS, seed, &scale.value)?;
        monotone += r.monotone as usize;
        band += r.band_ok as usize;
        baseline += r.baseline_ok as usize;
        details.push(serde_json::to_value(&r).expect("serializable"));
    }
    Ok(SuiteReport {
        suite: "thm2".into(),
        passed: monotone >= THM2_REQUIRED,
        summary: json!({
            "seeds": THM2_SEEDS,
            "monotone": monotone,
            "required": THM2_REQUIRED,
            "within_band": band,
            "baseline_ok": baseline,
        }),
        details: Value::Array(details),
    })
}

pub fn entropy(scale: &SuiteScale) -> Result<SuiteReport> {
    let seeds: Vec<u64> = (0..scale.entropy_seeds).collect();
    let r = measure_entropy_delta(
        EnvId::CartPole,
        &seeds,
        scale.entropy_states,
        &scale.entropy_backbone,
    )?;
    Ok(SuiteReport {
        suite: "entropy".into(),
        passed: r.passed,
        summary: json!({
            "mean_delta": r.mean_delta,
            "relative_delta": r.relative_delta,
            "positive": r.positive,
            "negative": r.negative,
            "p_value": r.p_value,
            "flagged_negative": r.flagged,
        }),
        details: serde_json::to_value(&r).expect("serializable"),
    })
}

pub fn run_suite(name: &str, scale: &SuiteScale) -> Result<SuiteReport> {
    match name {
        "lemma1" => lemma1(scale),
        "thm1" => thm1(scale),
        "thm2" => thm2(scale),
        "entropy" => entropy(scale),
        other => Err(Error::Invalid(format!("unknown suite {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_errors() {
        assert!(run_suite("nope", &SuiteScale::quick()).is_err());
    }

    #[test]
    fn quick_bound_suites_pass() {
        for name in ["lemma1", "thm1"] {
            let r = run_suite(name, &SuiteScale::quick()).unwrap();
            assert!(r.passed, "{name}: {}", r.summary);
        }
    }
}
