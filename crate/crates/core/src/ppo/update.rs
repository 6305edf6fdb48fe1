//! Clipped-surrogate policy update and value regression.

use crate::error::{shape_err, Result};
use crate::heads::{apply_update, Adam, GradientBuffer, HeadParams};
use crate::rng::RngStream;
use crate::tensor::{log_softmax, DenseMatrix};

use super::config::{TrainConfig, VALUE_COEF};
use super::rollout::{Critic, RolloutBuffer};

/// Loss, gradients and diagnostics of the policy objective on one minibatch.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    /// `-surrogate - β·entropy`, averaged over the batch.
    pub loss: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
    pub grads: GradientBuffer,
}

/// Evaluates `-mean(min(r·Â, clip(r, 1-ε, 1+ε)·Â)) - β·mean(H)` and its gradient.
pub fn policy_loss_and_grad(
    policy: &HeadParams,
    latents: &DenseMatrix,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_epsilon: f64,
    entropy_coef: f64,
) -> Result<PolicyBatch> {
    let b = latents.rows();
    if actions.len() != b || old_log_probs.len() != b || advantages.len() != b || b == 0 {
        return shape_err("minibatch arrays differ in length");
    }
    let cache = policy.forward_batch(latents)?;
    let a_count = cache.output.cols();
    let mut upstream = DenseMatrix::zeros(b, a_count);
    let (mut surrogate, mut entropy, mut kl, mut clipped, mut max_dev) =
        (0.0, 0.0, 0.0, 0usize, 0.0f64);
    let n = b as f64;
    for i in 0..b {
        let logp = log_softmax(cache.output.row(i));
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let h: f64 = -p
            .iter()
            .zip(logp.iter())
            .map(|(pi, li)| if *pi > 0.0 { pi * li } else { 0.0 })
            .sum::<f64>();
        let a = actions[i];
        let log_ratio = logp[a] - old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = advantages[i];
        let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped_ratio * adv;
        surrogate += unclipped_term.min(clipped_term);
        entropy += h;
        kl += (ratio - 1.0) - log_ratio;
        max_dev = max_dev.max((ratio - 1.0).abs());
        if (ratio - 1.0).abs() > clip_epsilon {
            clipped += 1;
        }
        let row = upstream.row_mut(i);
        if unclipped_term <= clipped_term {
            // d(-r·Â)/dz = -Â·r·(onehot(a) - p)
            for (j, g) in row.iter_mut().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                *g -= adv * ratio * (onehot - p[j]) / n;
            }
        }
        // d(-β·H)/dz_j = β·p_j·(log p_j + H)
        for (j, g) in row.iter_mut().enumerate() {
            *g += entropy_coef * p[j] * (logp[j] + h) / n;
        }
    }
    let (grads, _) = policy.backward(&cache, &upstream)?;
    let surrogate = surrogate / n;
    let entropy = entropy / n;
    Ok(PolicyBatch {
        loss: -surrogate - entropy_coef * entropy,
        surrogate,
        entropy,
        approx_kl: kl / n,
        clip_fraction: clipped as f64 / n,
        max_ratio_deviation: max_dev,
        grads,
    })
}

/// `VALUE_COEF · mean((V - R)²)` for one head and its gradient.
pub fn value_loss_and_grad(
    head: &HeadParams,
    latents: &DenseMatrix,
    returns: &[f64],
) -> Result<(f64, GradientBuffer)> {
    let b = latents.rows();
    if returns.len() != b || b == 0 {
        return shape_err("value minibatch arrays differ in length");
    }
    let cache = head.forward_batch(latents)?;
    let n = b as f64;
    let mut loss = 0.0;
    let mut upstream = DenseMatrix::zeros(b, 1);
    for i in 0..b {
        let err = cache.output.get(i, 0) - returns[i];
        loss += err * err;
        upstream.set(i, 0, 2.0 * VALUE_COEF * err / n);
    }
    let (grads, _) = head.backward(&cache, &upstream)?;
    Ok((VALUE_COEF * loss / n, grads))
}

/// Diagnostics of one update, averaged over the final epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub entropy: f64,
    /// Mean squared error of the critic prediction against return targets.
    pub value_loss: f64,
    /// Mean pre-clip policy gradient norm.
    pub grad_norm: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Largest `|r - 1|` seen on the first minibatch of the first epoch.
    pub first_ratio_deviation: f64,
    /// Minibatches skipped because of a non-finite loss or gradient.
    pub skipped: usize,
}

fn gather(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    DenseMatrix::from_vec(idx.len(), m.cols(), data).expect("rows of a finite matrix")
}

/// Several epochs of shuffled minibatch updates of both heads.
pub fn ppo_update(
    buf: &RolloutBuffer,
    policy: &mut HeadParams,
    policy_opt: &mut Adam,
    critic: &mut Critic,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<UpdateStats> {
    let n = buf.len();
    if buf.advantages.len() != n || buf.returns.len() != n {
        return shape_err("rollout advantages have not been computed");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats {
        entropy: 0.0,
        value_loss: 0.0,
        grad_norm: 0.0,
        approx_kl: 0.0,
        clip_fraction: 0.0,
        first_ratio_deviation: 0.0,
        skipped: 0,
    };
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let last_epoch = epoch + 1 == cfg.epochs;
        let (mut ent, mut vl, mut gn, mut kl, mut cf, mut batches) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
        for (k, idx) in order.chunks(cfg.minibatch).enumerate() {
            let h = gather(&buf.latents, idx);
            let actions: Vec<usize> = idx.iter().map(|&i| buf.actions[i]).collect();
            let old: Vec<f64> = idx.iter().map(|&i| buf.log_probs[i]).collect();
            let adv: Vec<f64> = idx.iter().map(|&i| buf.advantages[i]).collect();
            let ret: Vec<f64> = idx.iter().map(|&i| buf.returns[i]).collect();

            let mut pb = policy_loss_and_grad(
                policy,
                &h,
                &actions,
                &old,
                &adv,
                cfg.clip_epsilon,
                cfg.entropy_coef,
            )?;
            if epoch == 0 && k == 0 {
                stats.first_ratio_deviation = pb.max_ratio_deviation;
            }
            let hv = match &buf.critic_latents {
                Some(m) => gather(m, idx),
                None => h,
            };
            let mut value_parts = Vec::with_capacity(critic.heads.len());
            let mut finite = pb.loss.is_finite();
            for head in &critic.heads {
                let (loss, grads) = value_loss_and_grad(head, &hv, &ret)?;
                finite &= loss.is_finite();
                value_parts.push((loss, grads));
            }
            if !finite {
                stats.skipped += 1;
                continue;
            }
            let info = apply_update(
                policy,
                &mut pb.grads,
                cfg.policy_lr,
                cfg.grad_clip,
                policy_opt,
            )?;
            if info.skipped {
                stats.skipped += 1;
            }
            for ((head, opt), (_, mut grads)) in critic
                .heads
                .iter_mut()
                .zip(critic.optims.iter_mut())
                .zip(value_parts)
            {
                if apply_update(head, &mut grads, cfg.value_lr, cfg.grad_clip, opt)?.skipped {
                    stats.skipped += 1;
                }
            }
            if last_epoch {
                let pred = critic.predict_batch(&hv)?;
                let mse = pred
                    .iter()
                    .zip(&ret)
                    .map(|(p, r)| (p - r) * (p - r))
                    .sum::<f64>()
                    / ret.len() as f64;
                ent += pb.entropy;
                vl += mse;
                gn += info.grad_norm;
                kl += pb.approx_kl;
                cf += pb.clip_fraction;
                batches += 1;
            }
        }
        if last_epoch && batches > 0 {
            let m = batches as f64;
            stats.entropy = ent / m;
            stats.value_loss = vl / m;
            stats.grad_norm = gn / m;
            stats.approx_kl = kl / m;
            stats.clip_fraction = cf / m;
        }
    }
    Ok(stats)
}
