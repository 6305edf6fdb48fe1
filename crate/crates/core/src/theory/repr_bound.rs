//! Certified bound on the latent shift caused by weight quantization.
//!
//! The quantized encoder is run on the reference path (dequantized weights,
//! full-precision activations), so the only difference between the two
//! encoders is the weight perturbation `δ = α·T − W`. Starting from the
//! full-precision trace, a Frobenius-norm bound on the residual-stream shift
//! is pushed through every block:
//!
//! - layer norm is `g_max / s_min`-Lipschitz along the segment, where `s_min`
//!   lower-bounds the row scale given the running shift bound;
//! - a linear map shifts by `‖ΔU‖·‖W̃‖₂ + ‖U·δᵀ‖_F`;
//! - attention scores shift by `(‖ΔQ‖·κ_K + κ_Q·‖ΔK‖)/√d_h`, softmax is
//!   ½-Lipschitz and `ΔO = ΔP·Ṽ + P·ΔV`;
//! - ReLU is 1-Lipschitz and residual branches add.
//!
//! Each block maps a shift bound `D` to `a·D + b`; with `a ≥ 1` the final
//! shift is at most `‖δ‖·Π(a_l + b_l/‖δ‖)`, and mean pooling contributes the
//! final norm factor over `√T`.

use serde::Serialize;

use crate::backbone::{BackboneModel, Block, DenseBackbone, LayerNorm, LN_EPS};
use crate::error::{Error, Result};
use crate::quant::{dequantize, TernaryTensor};
use crate::tensor::{l2_norm, spectral_norm_upper_bound, DenseMatrix};

use super::{BoundCheckResult, LipschitzEstimate};

/// Minimum number of inputs for a bound suite.
pub const MIN_INPUTS: usize = 100;

#[derive(Debug, Clone, Copy)]
struct Affine {
    a: f64,
    b: f64,
}

impl Affine {
    const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    fn at(self, d: f64) -> f64 {
        self.a * d + self.b
    }

    fn scale(self, k: f64) -> Affine {
        Affine {
            a: self.a * k,
            b: self.b * k,
        }
    }

    fn plus(self, o: Affine) -> Affine {
        Affine {
            a: self.a + o.a,
            b: self.b + o.b,
        }
    }

    fn shift(self, c: f64) -> Affine {
        Affine {
            a: self.a,
            b: self.b + c,
        }
    }
}

/// Lipschitz factor of `ln` over every row of `x` perturbed by at most `r`.
fn ln_factor(ln: &LayerNorm, x: &DenseMatrix, r: f64) -> f64 {
    let g_max = ln.gain.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let d = x.cols() as f64;
    let mut s_min = f64::INFINITY;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d;
        let sigma = (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d).sqrt();
        let low = (sigma - r / d.sqrt()).max(0.0);
        s_min = s_min.min((low * low + LN_EPS).sqrt());
    }
    g_max / s_min
}

/// Bound on the row norm of any layer-norm output.
fn ln_row_bound(ln: &LayerNorm) -> f64 {
    let g_max = ln.gain.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    g_max * (ln.gain.len() as f64).sqrt() + l2_norm(&ln.bias)
}

fn columns(m: &DenseMatrix, start: usize, width: usize) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), width, |i, j| m.get(i, start + j))
}

fn rows_of(m: &DenseMatrix, start: usize, count: usize) -> DenseMatrix {
    DenseMatrix::from_fn(count, m.cols(), |i, j| m.get(start + i, j))
}

/// Spectral bounds of the quantized weights, shared across inputs.
struct BlockNorms {
    q: f64,
    k: f64,
    v: f64,
    o: f64,
    up: f64,
    down: f64,
    k_heads: Vec<f64>,
    v_heads: Vec<f64>,
    deltas: [DenseMatrix; 6],
}

fn block_norms(
    fp: &Block<DenseMatrix>,
    q: &Block<DenseMatrix>,
    heads: usize,
) -> Result<BlockNorms> {
    let hd = q.wq.rows() / heads;
    let per_head = |w: &DenseMatrix| {
        (0..heads)
            .map(|h| spectral_norm_upper_bound(&rows_of(w, h * hd, hd)))
            .collect()
    };
    Ok(BlockNorms {
        q: spectral_norm_upper_bound(&q.wq),
        k: spectral_norm_upper_bound(&q.wk),
        v: spectral_norm_upper_bound(&q.wv),
        o: spectral_norm_upper_bound(&q.wo),
        up: spectral_norm_upper_bound(&q.w1),
        down: spectral_norm_upper_bound(&q.w2),
        k_heads: per_head(&q.wk),
        v_heads: per_head(&q.wv),
        deltas: [
            q.wq.sub(&fp.wq)?,
            q.wk.sub(&fp.wk)?,
            q.wv.sub(&fp.wv)?,
            q.wo.sub(&fp.wo)?,
            q.w1.sub(&fp.w1)?,
            q.w2.sub(&fp.w2)?,
        ],
    })
}

/// A matched pair of encoders prepared for certification.
pub struct CertifiedPair<'a> {
    fp: &'a DenseBackbone,
    quantized: DenseBackbone,
    norms: Vec<BlockNorms>,
    delta_norm: f64,
    theta_norm: f64,
}

impl<'a> CertifiedPair<'a> {
    /// `quantized` must share the architecture, embeddings and norms of `fp`.
    pub fn new(fp: &'a DenseBackbone, quantized: &BackboneModel) -> Result<Self> {
        let (_, total) = fp.perturbation(quantized)?;
        if fp.embeddings() != quantized.embeddings()
            || fp.config().heads != quantized.config().heads
            || fp.config().ffn_dim != quantized.config().ffn_dim
        {
            return Err(Error::Shape(
                "encoders differ outside their linear layers".into(),
            ));
        }
        let reference = quantized.dequantized();
        let heads = fp.config().heads;
        let norms = fp
            .blocks()
            .iter()
            .zip(reference.blocks())
            .map(|(a, b)| block_norms(a, b, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fp,
            quantized: reference,
            norms,
            delta_norm: total.delta_norm,
            theta_norm: total.theta_norm,
        })
    }

    pub fn delta_norm(&self) -> f64 {
        self.delta_norm
    }

    pub fn theta_norm(&self) -> f64 {
        self.theta_norm
    }

    pub fn epsilon_q(&self) -> f64 {
        if self.theta_norm == 0.0 {
            0.0
        } else {
            self.delta_norm / self.theta_norm
        }
    }

    pub fn reference(&self) -> &DenseBackbone {
        &self.quantized
    }

    /// Measured latent shift on `tokens` and its certified bound.
    pub fn certify(&self, tokens: &[u32]) -> Result<LatentCertificate> {
        let trace = self.fp.encode_traced(tokens)?;
        let h_q = self.quantized.encode(tokens)?;
        let measured = l2_norm(
            &h_q.iter()
                .zip(trace.latent.iter())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        let cfg = self.fp.config();
        let t = tokens.len() as f64;
        let hd = cfg.head_dim();
        let mut dist = 0.0;
        let mut factors = Vec::with_capacity(cfg.layers + 1);
        for ((bt, fp), (norms, q)) in trace
            .blocks
            .iter()
            .zip(self.fp.blocks())
            .zip(self.norms.iter().zip(self.quantized.blocks()))
        {
            let x = Affine::IDENTITY;
            let l1 = ln_factor(&fp.ln1, &bt.input, dist);
            let du1 = x.scale(l1);
            let shift = |u: &DenseMatrix, delta: &DenseMatrix| -> Result<f64> {
                Ok(u.matmul_t(delta)?.frobenius())
            };
            let [dq_w, dk_w, dv_w, do_w, d1_w, d2_w] = &norms.deltas;
            let dq = du1.scale(norms.q).shift(shift(&bt.u1, dq_w)?);
            let dk = du1.scale(norms.k).shift(shift(&bt.u1, dk_w)?);
            let dv = du1.scale(norms.v).shift(shift(&bt.u1, dv_w)?);

            let qm = bt.u1.matmul_t(&fp.wq)?;
            let km = bt.u1.matmul_t(&fp.wk)?;
            let vm = bt.u1.matmul_t(&fp.wv)?;
            let rho = t.sqrt() * ln_row_bound(&q.ln1);
            let (mut kappa_q, mut kappa_k, mut kappa_v, mut p_norm) =
                (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for h in 0..cfg.heads {
                kappa_q = kappa_q.max(spectral_norm_upper_bound(&columns(&qm, h * hd, hd)));
                let k_fp = spectral_norm_upper_bound(&columns(&km, h * hd, hd));
                kappa_k = kappa_k.max((rho * norms.k_heads[h]).min(k_fp + dk.at(dist)));
                let v_fp = spectral_norm_upper_bound(&columns(&vm, h * hd, hd));
                kappa_v = kappa_v.max((rho * norms.v_heads[h]).min(v_fp + dv.at(dist)));
                let p = &bt.probs[h];
                let col_max = (0..p.cols())
                    .map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>())
                    .fold(0.0f64, f64::max);
                p_norm = p_norm.max(col_max.sqrt());
            }
            let dz = dq
                .scale(kappa_k)
                .plus(dk.scale(kappa_q))
                .scale(1.0 / (hd as f64).sqrt());
            let dp = dz.scale(0.5);
            let d_attn = dp.scale(kappa_v).plus(dv.scale(p_norm));
            let da = d_attn.scale(norms.o).shift(shift(&bt.attn, do_w)?);
            let dm = x.plus(da);
            let l2 = ln_factor(&fp.ln2, &bt.mid, dm.at(dist));
            let dg = dm.scale(l2).scale(norms.up).shift(shift(&bt.u2, d1_w)?);
            let df = dg.scale(norms.down).shift(shift(&bt.hidden, d2_w)?);
            let dy = dm.plus(df);
            factors.push(if self.delta_norm > 0.0 {
                dy.a + dy.b / self.delta_norm
            } else {
                dy.a
            });
            dist = dy.at(dist);
        }
        let lf = ln_factor(self.fp.final_ln(), &trace.last, dist);
        factors.push(lf / t.sqrt());
        Ok(LatentCertificate {
            measured,
            bound: lf * dist / t.sqrt(),
            lipschitz: LipschitzEstimate::from_factors(factors),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentCertificate {
    /// `‖h_Q − h_FP‖₂` on this input.
    pub measured: f64,
    /// Certified bound from the recursion itself.
    pub bound: f64,
    /// Per-block factors whose product times `‖δ‖` dominates `bound`.
    pub lipschitz: LipschitzEstimate,
}

/// Certificate for one input; see [`CertifiedPair::certify`].
pub fn certify_latent(
    fp: &DenseBackbone,
    quantized: &BackboneModel,
    tokens: &[u32],
) -> Result<LatentCertificate> {
    CertifiedPair::new(fp, quantized)?.certify(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReprBoundReport {
    /// Worst-case shift against `L̂_f · ε_Q · ‖θ‖₂`.
    pub result: BoundCheckResult,
    /// Estimate with the largest product over the inputs.
    pub lipschitz: LipschitzEstimate,
    pub epsilon_q: f64,
    pub theta_norm: f64,
    pub inputs: usize,
    /// Inputs whose own certificate holds.
    pub inputs_within_bound: usize,
}

/// Checks `max ‖h_Q − h_FP‖₂ ≤ L̂_f·ε_Q·‖θ‖₂` over `inputs`.
pub fn verify_repr_bound(
    model: &BackboneModel,
    shadow: &DenseBackbone,
    inputs: &[Vec<u32>],
) -> Result<ReprBoundReport> {
    if inputs.len() < MIN_INPUTS {
        return Err(Error::Invalid(format!(
            "the representation bound needs at least {MIN_INPUTS} inputs, got {}",
            inputs.len()
        )));
    }
    let pair = CertifiedPair::new(shadow, model)?;
    let mut measured = 0.0f64;
    let mut best: Option<LipschitzEstimate> = None;
    let mut within = 0;
    for tokens in inputs {
        let c = pair.certify(tokens)?;
        measured = measured.max(c.measured);
        if BoundCheckResult::new(c.measured, c.bound).holds {
            within += 1;
        }
        if best
            .as_ref()
            .is_none_or(|b| c.lipschitz.product > b.product)
        {
            best = Some(c.lipschitz);
        }
    }
    let lipschitz = best.expect("non-empty inputs");
    let bound = lipschitz.product * pair.epsilon_q() * pair.theta_norm();
    Ok(ReprBoundReport {
        result: BoundCheckResult::new(measured, bound),
        lipschitz,
        epsilon_q: pair.epsilon_q(),
        theta_norm: pair.theta_norm(),
        inputs: inputs.len(),
        inputs_within_bound: within,
    })
}

/// One linear layer: `‖(W̃ − W)x‖ ≤ ‖W̃ − W‖₂·‖x‖`.
pub fn linear_bound_check(
    w: &DenseMatrix,
    q: &TernaryTensor,
    x: &[f64],
) -> Result<BoundCheckResult> {
    let delta = dequantize(q).sub(w)?;
    let measured = l2_norm(&delta.matvec(x)?);
    Ok(BoundCheckResult::new(
        measured,
        spectral_norm_upper_bound(&delta) * l2_norm(x),
    ))
}
