//! Growth of the quantized-versus-FP value gap with the discount factor.
//!
//! For each γ a linear value function on `[h, 1]` is fitted to the TD fixed
//! point by ridge-regularized LSTD, once on ternary latents and once on
//! full-precision latents of the same transitions, and the two are compared
//! on held-out states.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::backbone::{build_backbone, BackboneConfig, BackboneModel, DenseBackbone};
use crate::envs::{self, EnvId};
use crate::error::{Error, Result};
use crate::ppo::rollout::state_tokens;
use crate::rng::RngStream;

pub const DEFAULT_GAMMAS: [f64; 4] = [0.0, 0.5, 0.9, 0.99];
/// Largest allowed spread of `gap·(1 − γ)` across the positive part of the grid.
pub const BAND: f64 = 10.0;
const RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueAmpConfig {
    pub transitions: usize,
    pub heldout: usize,
    /// Ridge strength per transition.
    pub ridge: f64,
    pub backbone: BackboneConfig,
}

impl Default for ValueAmpConfig {
    fn default() -> Self {
        Self {
            transitions: 4000,
            heldout: 500,
            ridge: 1e-3,
            backbone: BackboneConfig::small(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    /// Max-norm gap on held-out states.
    pub gap: f64,
    pub scaled_gap: f64,
    pub horizon: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueAmpReport {
    pub seed: u64,
    pub rows: Vec<GammaRow>,
    /// Gap non-decreasing over the positive discounts.
    pub monotone: bool,
    /// The undiscounted-bootstrap baseline is no larger than any other gap.
    pub baseline_ok: bool,
    pub band_ratio: f64,
    pub band_ok: bool,
    pub all_converged: bool,
}

struct Episode {
    latents_q: Vec<Vec<f64>>,
    latents_fp: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    terminal: bool,
}

fn features(h: &[f64]) -> DVector<f64> {
    DVector::from_iterator(h.len() + 1, h.iter().copied().chain(std::iter::once(1.0)))
}

fn run_episodes(
    env: EnvId,
    model: &BackboneModel,
    shadow: &DenseBackbone,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < steps {
        let mut state = envs::reset(env, rng);
        let mut ep = Episode {
            latents_q: Vec::new(),
            latents_fp: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
        };
        loop {
            let tokens = state_tokens(model, &state)?;
            ep.latents_q.push(model.encode(&tokens)?.into_inner());
            ep.latents_fp.push(shadow.encode(&tokens)?.into_inner());
            if state.is_done() || total == steps {
                break;
            }
            let r = envs::step(&mut state, rng.below(env.action_count()))?;
            ep.rewards.push(r.reward);
            ep.terminal = r.done;
            total += 1;
        }
        out.push(ep);
    }
    Ok(out)
}

/// Ridge LSTD weights and whether the solve met the residual tolerance.
fn lstd(episodes: &[Episode], quantized: bool, gamma: f64, ridge: f64) -> (DVector<f64>, bool) {
    let dim = episodes[0].latents_q[0].len() + 1;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let mut n = 0usize;
    for ep in episodes {
        let hs = if quantized {
            &ep.latents_q
        } else {
            &ep.latents_fp
        };
        for (t, &r) in ep.rewards.iter().enumerate() {
            let phi = features(&hs[t]);
            let last = t + 1 == ep.rewards.len();
            let next = if last && ep.terminal {
                DVector::zeros(dim)
            } else {
                features(&hs[t + 1]) * gamma
            };
            a += &phi * (&phi - next).transpose();
            b += &phi * r;
            n += 1;
        }
    }
    for i in 0..dim {
        a[(i, i)] += ridge * n as f64;
    }
    match a.clone().lu().solve(&b) {
        Some(w) if w.iter().all(|v| v.is_finite()) => {
            let residual = (&a * &w - &b).norm() / b.norm().max(f64::MIN_POSITIVE);
            (w, residual < RESIDUAL_TOL)
        }
        _ => (DVector::zeros(dim), false),
    }
}

/// Value gaps over `gammas` for one seed under a uniform behavior policy.
pub fn verify_value_amplification(
    env: EnvId,
    gammas: &[f64],
    seed: u64,
    cfg: &ValueAmpConfig,
) -> Result<ValueAmpReport> {
    if gammas.is_empty() || gammas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "discount grid must be non-empty and strictly increasing".into(),
        ));
    }
    if gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
        return Err(Error::Invalid("discounts must lie in [0, 1)".into()));
    }
    if cfg.transitions == 0 || cfg.heldout == 0 {
        return Err(Error::Invalid(
            "transition and held-out counts must be positive".into(),
        ));
    }
    let (model, shadow) = build_backbone(&cfg.backbone, &mut RngStream::new(seed, 1))?;
    let train = run_episodes(
        env,
        &model,
        &shadow,
        cfg.transitions,
        &mut RngStream::new(seed, 21),
    )?;
    let held = run_episodes(
        env,
        &model,
        &shadow,
        cfg.heldout,
        &mut RngStream::new(seed, 22),
    )?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let (wq, okq) = lstd(&train, true, gamma, cfg.ridge);
        let (wf, okf) = lstd(&train, false, gamma, cfg.ridge);
        let mut gap = 0.0f64;
        for ep in &held {
            for (hq, hf) in ep.latents_q.iter().zip(&ep.latents_fp) {
                gap = gap.max((features(hq).dot(&wq) - features(hf).dot(&wf)).abs());
            }
        }
        rows.push(GammaRow {
            gamma,
            gap,
            scaled_gap: gap * (1.0 - gamma),
            horizon: 1.0 / (1.0 - gamma),
            converged: okq && okf,
        });
    }
    Ok(summarize(seed, rows))
}

fn summarize(seed: u64, rows: Vec<GammaRow>) -> ValueAmpReport {
    let positive: Vec<&GammaRow> = rows.iter().filter(|r| r.gamma > 0.0).collect();
    let monotone = positive.windows(2).all(|w| w[1].gap >= w[0].gap);
    let baseline_ok = match rows.iter().find(|r| r.gamma == 0.0) {
        Some(base) => positive.iter().all(|r| base.gap <= r.gap),
        None => true,
    };
    let scaled: Vec<f64> = positive.iter().map(|r| r.scaled_gap).collect();
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().cloned().fold(0.0, f64::max);
    let band_ratio = if scaled.is_empty() {
        1.0
    } else if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    };
    let all_converged = rows.iter().all(|r| r.converged);
    ValueAmpReport {
        seed,
        rows,
        monotone,
        baseline_ok,
        band_ratio,
        band_ok: band_ratio <= BAND,
        all_converged,
    }
}
