//! Generalized advantage estimation.

use crate::error::{shape_err, Result};

/// Advantages and return targets for one rollout.
///
/// `next_values[t]` is the value of the state after step `t`, already zero
/// where the episode terminated. `ends[t]` marks the last step of an episode
/// (terminated or truncated) and stops the backward recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || next_values.len() != n || ends.len() != n {
        return shape_err("rollout arrays differ in length");
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        let carry = if ends[t] {
            0.0
        } else {
            gamma * lambda * next_adv
        };
        adv[t] = delta + carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population std, floored at 1e-8).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for x in xs {
        *x = (*x - mean) / std;
    }
}
