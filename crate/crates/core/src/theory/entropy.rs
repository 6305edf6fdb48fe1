//! Paired comparison of initial policy entropy on the two latent pathways.

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::backbone::{build_backbone, BackboneConfig};
use crate::envs::{self, EnvId};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::ppo::rollout::state_tokens;
use crate::ppo::train::streams;
use crate::rng::RngStream;
use crate::tensor::entropy;

pub const MIN_SEEDS: usize = 20;
pub const DEFAULT_STATES: usize = 512;
/// Significance required when the mean difference is positive.
pub const ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyPair {
    pub seed: u64,
    pub ternary: f64,
    pub fp: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub env: String,
    pub pairs: Vec<EntropyPair>,
    pub mean_delta: f64,
    /// Mean difference relative to the mean FP entropy.
    pub relative_delta: f64,
    pub positive: usize,
    pub negative: usize,
    /// Two-sided exact sign-test p-value, ties dropped.
    pub p_value: f64,
    /// Mean difference is negative, against the expected direction.
    pub flagged: bool,
    pub passed: bool,
}

/// Two-sided exact sign test for `positive` against `negative` outcomes.
pub fn sign_test_p(positive: usize, negative: usize) -> f64 {
    let n = positive + negative;
    if n == 0 {
        return 1.0;
    }
    let k = positive.min(negative) as u64;
    let dist = Binomial::new(0.5, n as u64).expect("valid binomial");
    (2.0 * dist.cdf(k)).min(1.0)
}

/// Mean initial-policy entropy on ternary and FP latents for each seed.
pub fn measure_entropy_delta(
    env: EnvId,
    seeds: &[u64],
    states: usize,
    backbone: &BackboneConfig,
) -> Result<EntropyReport> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Invalid(format!(
            "the entropy comparison needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if states == 0 {
        return Err(Error::Invalid("need at least one state".into()));
    }
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (model, shadow) =
            build_backbone(backbone, &mut RngStream::new(seed, streams::BACKBONE))?;
        let head = HeadParams::policy(
            model.d_model(),
            env.action_count(),
            &mut RngStream::new(seed, streams::POLICY),
        )?;
        let mut rng = RngStream::new(seed, streams::ENV);
        let mut state = envs::reset(env, &mut rng);
        let (mut ht, mut hf) = (0.0, 0.0);
        for _ in 0..states {
            if state.is_done() {
                state = envs::reset(env, &mut rng);
            }
            let tokens = state_tokens(&model, &state)?;
            ht += entropy(&head.policy_forward(&model.encode(&tokens)?)?)?;
            hf += entropy(&head.policy_forward(&shadow.encode(&tokens)?)?)?;
            envs::step(&mut state, rng.below(env.action_count()))?;
        }
        let (ternary, fp) = (ht / states as f64, hf / states as f64);
        pairs.push(EntropyPair {
            seed,
            ternary,
            fp,
            delta: ternary - fp,
        });
    }
    Ok(summarize(env, pairs))
}

fn summarize(env: EnvId, pairs: Vec<EntropyPair>) -> EntropyReport {
    let n = pairs.len() as f64;
    let mean_delta = pairs.iter().map(|p| p.delta).sum::<f64>() / n;
    let mean_fp = pairs.iter().map(|p| p.fp).sum::<f64>() / n;
    let positive = pairs.iter().filter(|p| p.delta > 0.0).count();
    let negative = pairs.iter().filter(|p| p.delta < 0.0).count();
    let p_value = sign_test_p(positive, negative);
    EntropyReport {
        env: env.name().to_string(),
        mean_delta,
        relative_delta: if mean_fp > 0.0 {
            mean_delta / mean_fp
        } else {
            0.0
        },
        positive,
        negative,
        p_value,
        flagged: mean_delta < 0.0,
        passed: mean_delta <= 0.0 || p_value < ALPHA,
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: u64, k: u64) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
    }

    fn oracle(pos: u64, neg: u64) -> f64 {
        let n = pos + neg;
        let k = pos.min(neg);
        let tail: u128 = (0..=k).map(|i| binom(n, i)).sum();
        (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
    }

    #[test]
    fn sign_test_matches_enumeration() {
        for (p, n) in [(15, 5), (20, 0), (10, 10), (3, 14), (0, 0), (1, 0), (12, 8)] {
            let got = sign_test_p(p, n);
            let want = if p + n == 0 {
                1.0
            } else {
                oracle(p as u64, n as u64)
            };
            assert!((got - want).abs() < 1e-10, "{p} {n}: {got} vs {want}");
        }
        assert!((sign_test_p(15, 5) - 0.041_389_465_332_031_25).abs() < 1e-12);
    }

    fn pair(seed: u64, delta: f64) -> EntropyPair {
        EntropyPair {
            seed,
            ternary: 0.6 + delta,
            fp: 0.6,
            delta,
        }
    }

    #[test]
    fn pass_rule() {
        let up: Vec<EntropyPair> = (0..20)
            .map(|s| pair(s, if s < 16 { 0.01 } else { -0.01 }))
            .collect();
        let r = summarize(EnvId::CartPole, up);
        assert!(r.passed && !r.flagged && r.p_value < 0.1);
        let weak: Vec<EntropyPair> = (0..20)
            .map(|s| pair(s, if s < 11 { 0.02 } else { -0.01 }))
            .collect();
        let r = summarize(EnvId::CartPole, weak);
        assert!(r.mean_delta > 0.0 && !r.passed);
        let down: Vec<EntropyPair> = (0..20).map(|s| pair(s, -0.01)).collect();
        let r = summarize(EnvId::CartPole, down);
        assert!(r.passed && r.flagged);
    }

    #[test]
    fn identical_pathways_give_zero_delta() {
        let ties: Vec<EntropyPair> = (0..20).map(|s| pair(s, 0.0)).collect();
        let r = summarize(EnvId::CartPole, ties);
        assert_eq!(r.mean_delta, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.passed && !r.flagged);
    }

    #[test]
    fn too_few_seeds_error() {
        let seeds: Vec<u64> = (0..5).collect();
        assert!(
            measure_entropy_delta(EnvId::CartPole, &seeds, 8, &BackboneConfig::small()).is_err()
        );
    }

    #[test]
    fn small_run_produces_a_report() {
        let seeds: Vec<u64> = (0..20).collect();
        let r =
            measure_entropy_delta(EnvId::CartPole, &seeds, 16, &BackboneConfig::small()).unwrap();
        assert_eq!(r.pairs.len(), 20);
        let ln2 = std::f64::consts::LN_2;
        assert!(r
            .pairs
            .iter()
            .all(|p| p.fp <= ln2 + 1e-12 && p.ternary <= ln2 + 1e-12));
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }
}
