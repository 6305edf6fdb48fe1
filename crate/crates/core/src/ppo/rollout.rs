//! Actor and critic wiring and on-policy rollout collection.

use crate::backbone::{serialize_state, tokenize, BackboneModel, DenseBackbone, Template};
use crate::envs::{self, EnvId, EnvState};
use crate::error::{shape_err, Error, Result};
use crate::heads::{Adam, AdamConfig, HeadParams};
use crate::rng::RngStream;
use crate::tensor::{DenseMatrix, DenseVector};

use super::config::CriticMode;
use super::gae::{compute_gae, normalize};

/// Token ids for an environment state, including any instruction prefix.
pub fn state_tokens(model: &BackboneModel, state: &EnvState) -> Result<Vec<u32>> {
    let text = serialize_state(Template::Env(state.id()), &state.obs(), state.instruction())?;
    Ok(tokenize(model.vocab(), &text))
}

/// The frozen encoders a run reads latents from.
#[derive(Debug, Clone, Copy)]
pub struct Encoders<'a> {
    pub model: &'a BackboneModel,
    pub shadow: Option<&'a DenseBackbone>,
}

impl Encoders<'_> {
    /// Policy latent and critic latent for one state.
    pub fn latents(
        &self,
        state: &EnvState,
        mode: CriticMode,
    ) -> Result<(DenseVector, Option<DenseVector>)> {
        let tokens = state_tokens(self.model, state)?;
        let h = self.model.encode(&tokens)?;
        let hc = match mode {
            CriticMode::Fp32 => {
                let shadow = self.shadow.ok_or_else(|| {
                    Error::Invalid("fp32 critic needs the full-precision encoder".into())
                })?;
                Some(shadow.encode(&tokens)?)
            }
            _ => None,
        };
        Ok((h, hc))
    }
}

/// Value heads and their optimizers.
#[derive(Debug, Clone)]
pub struct Critic {
    pub mode: CriticMode,
    pub heads: Vec<HeadParams>,
    pub optims: Vec<Adam>,
}

pub fn make_critic(mode: CriticMode, input: usize, rng: &mut RngStream) -> Result<Critic> {
    let k = mode.members();
    if !matches!(k, 1 | 3 | 5) {
        return Err(Error::Invalid(format!(
            "ensemble size {k} is not 1, 3 or 5"
        )));
    }
    let heads = (0..k)
        .map(|i| HeadParams::value(input, &mut rng.fork(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Critic::from_heads(mode, heads)
}

impl Critic {
    pub fn from_heads(mode: CriticMode, heads: Vec<HeadParams>) -> Result<Self> {
        if heads.len() != mode.members() {
            return shape_err(format!(
                "{mode} critic needs {} heads, got {}",
                mode.members(),
                heads.len()
            ));
        }
        let optims = heads
            .iter()
            .map(|h| Adam::new(h, AdamConfig::default()))
            .collect();
        Ok(Self {
            mode,
            heads,
            optims,
        })
    }

    pub fn predict(&self, h: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for head in &self.heads {
            s += head.value_forward(h)?;
        }
        Ok(s / self.heads.len() as f64)
    }

    pub fn predict_batch(&self, batch: &DenseMatrix) -> Result<Vec<f64>> {
        let mut out = vec![0.0; batch.rows()];
        for head in &self.heads {
            let v = head.forward_batch(batch)?.output;
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        let k = self.heads.len() as f64;
        Ok(out.into_iter().map(|v| v / k).collect())
    }
}

/// Environment state carried across rollouts.
#[derive(Debug, Clone)]
pub struct Collector {
    pub env: EnvState,
    env_rng: RngStream,
    action_rng: RngStream,
    episode_return: f64,
    episode_len: usize,
}

impl Collector {
    pub fn new(id: EnvId, env_rng: RngStream, action_rng: RngStream) -> Self {
        let mut env_rng = env_rng;
        let env = envs::reset(id, &mut env_rng);
        Self {
            env,
            env_rng,
            action_rng,
            episode_return: 0.0,
            episode_len: 0,
        }
    }

    /// Return accumulated so far in the unfinished episode.
    pub fn partial_return(&self) -> f64 {
        self.episode_return
    }
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub obs: Vec<DenseVector>,
    pub latents: DenseMatrix,
    /// Present when the critic reads a different encoder.
    pub critic_latents: Option<DenseMatrix>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub ends: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn value_inputs(&self) -> &DenseMatrix {
        self.critic_latents.as_ref().unwrap_or(&self.latents)
    }

    /// Fills advantages (normalized) and return targets.
    pub fn finish(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (mut adv, ret) = compute_gae(
            &self.rewards,
            &self.values,
            &self.next_values,
            &self.ends,
            gamma,
            lambda,
        )?;
        normalize(&mut adv);
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

fn rows_to_matrix(rows: Vec<DenseVector>) -> Result<DenseMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    DenseMatrix::from_vec(
        r,
        c,
        rows.into_iter().flat_map(DenseVector::into_inner).collect(),
    )
}

/// Runs the stochastic policy for exactly `steps` environment steps.
pub fn collect_rollout(
    collector: &mut Collector,
    encoders: Encoders<'_>,
    policy: &HeadParams,
    critic: &Critic,
    steps: usize,
) -> Result<RolloutBuffer> {
    let mode = critic.mode;
    let mut obs = Vec::with_capacity(steps);
    let mut latents = Vec::with_capacity(steps);
    let mut critic_latents = Vec::new();
    let mut actions = Vec::with_capacity(steps);
    let mut log_probs = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    let mut values = Vec::with_capacity(steps);
    let mut next_values: Vec<Option<f64>> = Vec::with_capacity(steps);
    let mut ends = Vec::with_capacity(steps);
    let mut episode_returns = Vec::new();
    let mut episode_lengths = Vec::new();

    for t in 0..steps {
        let at = |e: Error| Error::AtStep {
            step: t,
            source: Box::new(e),
        };
        let (h, hc) = encoders.latents(&collector.env, mode).map_err(at)?;
        let probs = policy.policy_forward(&h).map_err(at)?;
        let action = collector.action_rng.categorical(&probs);
        let value = critic.predict(hc.as_deref().unwrap_or(&h)).map_err(at)?;
        obs.push(collector.env.obs());
        let result = envs::step(&mut collector.env, action).map_err(at)?;
        collector.episode_return += result.reward;
        collector.episode_len += 1;

        let next_value = if result.done {
            Some(0.0)
        } else if result.truncated {
            let (nh, nhc) = encoders.latents(&collector.env, mode).map_err(at)?;
            Some(critic.predict(nhc.as_deref().unwrap_or(&nh)).map_err(at)?)
        } else {
            None
        };
        let ended = result.done || result.truncated;
        latents.push(h);
        if let Some(hc) = hc {
            critic_latents.push(hc);
        }
        actions.push(action);
        log_probs.push(probs[action].ln());
        rewards.push(result.reward);
        values.push(value);
        next_values.push(next_value);
        ends.push(ended);

        if ended {
            episode_returns.push(collector.episode_return);
            episode_lengths.push(collector.episode_len);
            collector.episode_return = 0.0;
            collector.episode_len = 0;
            collector.env = envs::reset(collector.env.id(), &mut collector.env_rng);
        }
    }

    if next_values.last().is_some_and(Option::is_none) {
        let (h, hc) = encoders.latents(&collector.env, mode)?;
        let v = critic.predict(hc.as_deref().unwrap_or(&h))?;
        *next_values.last_mut().expect("non-empty") = Some(v);
    }
    let next_values = (0..steps)
        .map(|t| next_values[t].unwrap_or_else(|| values[t + 1]))
        .collect();

    Ok(RolloutBuffer {
        obs,
        latents: rows_to_matrix(latents)?,
        critic_latents: if critic_latents.is_empty() {
            None
        } else {
            Some(rows_to_matrix(critic_latents)?)
        },
        actions,
        log_probs,
        rewards,
        values,
        next_values,
        ends,
        advantages: Vec::new(),
        returns: Vec::new(),
        episode_returns,
        episode_lengths,
    })
}
