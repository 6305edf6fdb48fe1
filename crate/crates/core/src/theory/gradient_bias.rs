//! Bias of the policy gradient when latents come from the quantized encoder.
//!
//! The per-sample loss is `ℓ(φ, h) = −Â·log π_a(h) − β·H(π(h))` for a
//! `d → m₁ → m₂ → n` tanh head. Writing `e₃ = ∂ℓ/∂z₃` and back-propagating
//! `e₂ = (W₃ᵀe₃) ⊙ (1 − a₂²)`, `e₁ = (W₂ᵀe₂) ⊙ (1 − a₁²)`, the parameter
//! gradient is `(e₃a₂ᵀ, e₃, e₂a₁ᵀ, e₂, e₁hᵀ, e₁)`. Its Lipschitz constant in
//! `h` follows from the product rule with
//!
//! - `‖e₃‖ ≤ √2·|Â| + 2β·ln n` and `e₃` is `(|Â|/2 + β·c_H(n))·‖W₃‖‖W₂‖‖W₁‖`-Lipschitz;
//! - `|d/dz (1 − tanh²z)| ≤ 4/(3√3)`, `|tanh| ≤ 1`, `‖a_k‖ ≤ √m_k`.
//!
//! `c_H(n) = 2/e + 4·ln n + 2` bounds the absolute row sums of the entropy
//! Hessian in logit space.

use serde::Serialize;

use crate::backbone::{BackboneModel, DenseBackbone};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::ppo::policy_loss_and_grad;
use crate::tensor::{l2_norm, log_softmax, spectral_norm_upper_bound, DenseMatrix};

use super::repr_bound::CertifiedPair;
use super::BoundCheckResult;

/// Bound on `|d/dz (1 − tanh² z)|`.
pub const SECH2_SLOPE: f64 = 0.769_800_358_919_501_4;

/// Row-sum bound of the Hessian of `Σ p log p` in the logits.
pub fn entropy_hessian_bound(n: usize) -> f64 {
    2.0 / std::f64::consts::E + 4.0 * (n as f64).ln() + 2.0
}

/// Lipschitz constant in `h` of the per-sample gradient, for `‖h‖ ≤ radius`.
pub fn policy_gradient_lipschitz(
    head: &HeadParams,
    max_abs_adv: f64,
    entropy_coef: f64,
    radius: f64,
) -> f64 {
    let w: Vec<f64> = head.weights.iter().map(spectral_norm_upper_bound).collect();
    let (w1, w2, w3) = (w[0], w[1], w[2]);
    let m1 = (head.weights[0].rows() as f64).sqrt();
    let m2 = (head.weights[1].rows() as f64).sqrt();
    let n = head.output_dim();
    let e3 = std::f64::consts::SQRT_2 * max_abs_adv + 2.0 * entropy_coef * (n as f64).ln();
    let lam3 = (0.5 * max_abs_adv + entropy_coef * entropy_hessian_bound(n)) * w3 * w2 * w1;
    let e2 = w3 * e3;
    let lam2 = w3 * lam3 + w3 * e3 * SECH2_SLOPE * w2 * w1;
    let e1 = w2 * e2;
    let lam1 = w2 * lam2 + w2 * e2 * SECH2_SLOPE * w1;
    let blocks = [
        lam3 * m2 + e3 * w2 * w1,
        lam3,
        lam2 * m1 + e2 * w1,
        lam2,
        lam1 * radius + e1,
        lam1,
    ];
    blocks.iter().map(|b| b * b).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBiasCheck {
    /// `‖g_Q − g_FP‖₂` against `L̂_π · L̂_f · ε_Q · ‖θ‖₂`.
    pub result: BoundCheckResult,
    pub l_pi: f64,
    pub l_f: f64,
    pub epsilon_q: f64,
    pub theta_norm: f64,
    /// Largest `‖h_Q − h_FP‖₂` over the batch.
    pub max_latent_shift: f64,
}

/// Policy gradient at ratio one: `∇φ mean(−Â·log π_a − β·H)`.
pub fn policy_gradient(
    head: &HeadParams,
    latents: &DenseMatrix,
    actions: &[usize],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<Vec<f64>> {
    let out = head.forward_batch(latents)?.output;
    let old: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(i, &a)| log_softmax(out.row(i))[a])
        .collect();
    let pb = policy_loss_and_grad(head, latents, actions, &old, advantages, 0.2, entropy_coef)?;
    Ok(pb.grads.flatten())
}

/// Compares policy gradients on the quantized and full-precision latents of one batch.
pub fn measure_gradient_bias(
    head: &HeadParams,
    model: &BackboneModel,
    shadow: &DenseBackbone,
    batch: &[Vec<u32>],
    actions: &[usize],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<GradientBiasCheck> {
    if batch.is_empty() {
        return Err(Error::Invalid(
            "gradient bias needs a non-empty batch".into(),
        ));
    }
    if actions.len() != batch.len() || advantages.len() != batch.len() {
        return Err(Error::Shape(
            "batch, actions and advantages differ in length".into(),
        ));
    }
    let pair = CertifiedPair::new(shadow, model)?;
    let d = shadow.d_model();
    let mut h_fp = Vec::with_capacity(batch.len() * d);
    let mut h_q = Vec::with_capacity(batch.len() * d);
    let (mut l_f, mut radius, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for tokens in batch {
        let c = pair.certify(tokens)?;
        l_f = l_f.max(c.lipschitz.product);
        shift = shift.max(c.measured);
        let a = shadow.encode(tokens)?;
        let b = pair.reference().encode(tokens)?;
        radius = radius.max(a.norm()).max(b.norm());
        h_fp.extend(a.iter());
        h_q.extend(b.iter());
    }
    let h_fp = DenseMatrix::from_vec(batch.len(), d, h_fp)?;
    let h_q = DenseMatrix::from_vec(batch.len(), d, h_q)?;
    let g_fp = policy_gradient(head, &h_fp, actions, advantages, entropy_coef)?;
    let g_q = policy_gradient(head, &h_q, actions, advantages, entropy_coef)?;
    let measured = l2_norm(
        &g_q.iter()
            .zip(&g_fp)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let max_adv = advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let l_pi = policy_gradient_lipschitz(head, max_adv, entropy_coef, radius);
    let bound = l_pi * l_f * pair.epsilon_q() * pair.theta_norm();
    Ok(GradientBiasCheck {
        result: BoundCheckResult::new(measured, bound),
        l_pi,
        l_f,
        epsilon_q: pair.epsilon_q(),
        theta_norm: pair.theta_norm(),
        max_latent_shift: shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use crate::quant::QuantConfig;
    use crate::rng::RngStream;

    fn neg_entropy_grad(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let h: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        p.iter().map(|q| q * (q.ln() + h)).collect()
    }

    #[test]
    fn tanh_curvature_constant() {
        let mut best = 0.0f64;
        for i in 0..200_000 {
            let z = -5.0 + 10.0 * i as f64 / 200_000.0;
            let t = f64::tanh(z);
            best = best.max((2.0 * t * (1.0 - t * t)).abs());
        }
        assert!(best <= SECH2_SLOPE && SECH2_SLOPE - best < 1e-9);
    }

    #[test]
    fn entropy_hessian_is_within_bound() {
        let mut rng = RngStream::new(3, 0);
        for n in 2..7 {
            for _ in 0..200 {
                let scale = 10f64.powf(rng.uniform_range(-1.0, 1.3));
                let z: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
                let eps = 1e-6;
                let mut hess = vec![vec![0.0; n]; n];
                for k in 0..n {
                    let mut a = z.clone();
                    a[k] += eps;
                    let mut b = z.clone();
                    b[k] -= eps;
                    let (ga, gb) = (neg_entropy_grad(&a), neg_entropy_grad(&b));
                    for j in 0..n {
                        hess[j][k] = (ga[j] - gb[j]) / (2.0 * eps);
                    }
                }
                let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
                let mut lam = 0.0;
                for _ in 0..200 {
                    let w: Vec<f64> = (0..n)
                        .map(|j| (0..n).map(|k| hess[j][k] * v[k]).sum())
                        .collect();
                    lam = l2_norm(&w);
                    if lam == 0.0 {
                        break;
                    }
                    v = w.iter().map(|x| x / lam).collect();
                }
                assert!(lam <= entropy_hessian_bound(n), "n={n} lam={lam}");
                assert!(l2_norm(&neg_entropy_grad(&z)) <= 2.0 * (n as f64).ln() + 1e-12);
            }
        }
    }

    #[test]
    fn lipschitz_constant_dominates_sampled_quotients() {
        let mut rng = RngStream::new(5, 0);
        let mut head = HeadParams::policy(16, 3, &mut rng).unwrap();
        for w in head.weights[2].data_mut() {
            *w *= 50.0;
        }
        let radius = 4.0;
        for _ in 0..100 {
            let mut h1: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let n1 = l2_norm(&h1);
            h1.iter_mut().for_each(|v| *v *= radius * 0.9 / n1);
            let h2: Vec<f64> = h1.iter().map(|v| v + 0.01 * rng.normal()).collect();
            let a = rng.below(3);
            let adv = rng.normal() * 2.0;
            let beta = 0.05;
            let g = |h: &[f64]| {
                let m = DenseMatrix::from_vec(1, 16, h.to_vec()).unwrap();
                policy_gradient(&head, &m, &[a], &[adv], beta).unwrap()
            };
            let diff = l2_norm(
                &g(&h1)
                    .iter()
                    .zip(g(&h2))
                    .map(|(x, y)| x - y)
                    .collect::<Vec<_>>(),
            );
            let dh = l2_norm(&h1.iter().zip(&h2).map(|(x, y)| x - y).collect::<Vec<_>>());
            let r = l2_norm(&h2).max(radius);
            assert!(diff <= policy_gradient_lipschitz(&head, adv.abs(), beta, r) * dh);
        }
    }

    fn setup(
        seed: u64,
    ) -> (
        BackboneModel,
        DenseBackbone,
        HeadParams,
        Vec<Vec<u32>>,
        Vec<usize>,
        Vec<f64>,
    ) {
        let (model, shadow) =
            build_backbone(&BackboneConfig::small(), &mut RngStream::new(seed, 0)).unwrap();
        let mut rng = RngStream::new(seed, 1);
        let head = HeadParams::policy(64, 2, &mut rng).unwrap();
        let batch: Vec<Vec<u32>> = (0..16)
            .map(|_| {
                (0..20)
                    .map(|_| rng.below(shadow.vocab().len()) as u32)
                    .collect()
            })
            .collect();
        let actions = (0..16).map(|_| rng.below(2)).collect();
        let adv = (0..16).map(|_| rng.normal()).collect();
        (model, shadow, head, batch, actions, adv)
    }

    #[test]
    fn bias_is_bounded() {
        let (model, shadow, head, batch, actions, adv) = setup(2);
        let r =
            measure_gradient_bias(&head, &model, &shadow, &batch, &actions, &adv, 0.01).unwrap();
        assert!(r.result.holds && r.result.measured > 0.0, "{r:?}");
    }

    #[test]
    fn zero_advantages_leave_only_entropy_bias() {
        let (model, shadow, head, batch, actions, _) = setup(3);
        let zeros = vec![0.0; 16];
        let with_entropy =
            measure_gradient_bias(&head, &model, &shadow, &batch, &actions, &zeros, 0.01).unwrap();
        assert!(with_entropy.result.holds);
        assert!(with_entropy.result.measured > 0.0);
        let none =
            measure_gradient_bias(&head, &model, &shadow, &batch, &actions, &zeros, 0.0).unwrap();
        assert_eq!(none.result.measured, 0.0);
    }

    #[test]
    fn no_perturbation_no_bias() {
        let (model, _, head, batch, actions, adv) = setup(4);
        let fixed = model.dequantized();
        let again = fixed.quantize(&QuantConfig::default()).unwrap();
        let r = measure_gradient_bias(&head, &again, &fixed, &batch, &actions, &adv, 0.01).unwrap();
        assert!(r.result.measured < 1e-12 && r.result.holds);
    }

    #[test]
    fn empty_batch_errors() {
        let (model, shadow, head, ..) = setup(1);
        assert!(measure_gradient_bias(&head, &model, &shadow, &[], &[], &[], 0.0).is_err());
    }
}
