//! Pre-norm transformer encoder with ternary linear layers.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{quantize_activations, ternary_matmul_int};
use crate::quant::{
    dequantize, perturbation_between, quantize, PerturbationReport, QuantConfig, TernaryTensor,
};
use crate::rng::RngStream;
use crate::tensor::{softmax, DenseMatrix, DenseVector};

use super::tokenizer::{Vocabulary, MAX_TOKENS};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub quant: QuantConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            heads: 4,
            ffn_dim: 512,
            quant: QuantConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// The two-layer, d = 64 encoder used for training runs and bound suites.
    pub fn small() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            ffn_dim: 256,
            quant: QuantConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(2..=6).contains(&self.layers) {
            return bad(format!("layer count {} outside [2, 6]", self.layers));
        }
        if !(64..=256).contains(&self.d_model) {
            return bad(format!("model dim {} outside [64, 256]", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide d = {}",
                self.heads, self.d_model
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn dim must be positive".into());
        }
        self.quant.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mu = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let s = (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(v, (g, b))| g * (v - mu) / s + b)
            .collect()
    }

    pub fn apply_rows(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            out.extend(self.apply(x.row(i)));
        }
        DenseMatrix::from_vec(x.rows(), x.cols(), out).expect("same shape")
    }
}

/// A bias-free linear map `y = W x` with `W` stored out × in.
pub trait LinearMap {
    fn out_dim(&self) -> usize;
    fn in_dim(&self) -> usize;
    /// Applies the map to every row of `x`.
    fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix>;

    /// Applies three maps to the same input.
    fn apply_rows_shared(maps: [&Self; 3], x: &DenseMatrix) -> Result<[DenseMatrix; 3]>
    where
        Self: Sized,
    {
        Ok([
            maps[0].apply_rows(x)?,
            maps[1].apply_rows(x)?,
            maps[2].apply_rows(x)?,
        ])
    }
}

impl LinearMap for DenseMatrix {
    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul_t(self)
    }
}

/// Each row is quantized to int8 and multiplied by the packed kernel.
impl LinearMap for TernaryTensor {
    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (codes, scales) = quantize_rows(x, self.cols())?;
        self.apply_codes(&codes, &scales)
    }

    fn apply_rows_shared(maps: [&Self; 3], x: &DenseMatrix) -> Result<[DenseMatrix; 3]> {
        let (codes, scales) = quantize_rows(x, maps[0].cols())?;
        Ok([
            maps[0].apply_codes(&codes, &scales)?,
            maps[1].apply_codes(&codes, &scales)?,
            maps[2].apply_codes(&codes, &scales)?,
        ])
    }
}

fn quantize_rows(x: &DenseMatrix, cols: usize) -> Result<(Vec<i8>, Vec<f64>)> {
    if x.cols() != cols {
        return shape_err(format!(
            "input has {} columns, layer expects {cols}",
            x.cols()
        ));
    }
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let q = quantize_activations(x.row(i))?;
        codes.extend_from_slice(&q.values);
        scales.push(q.scale);
    }
    Ok((codes, scales))
}

impl TernaryTensor {
    fn apply_codes(&self, codes: &[i8], scales: &[f64]) -> Result<DenseMatrix> {
        let acc = ternary_matmul_int(self, codes, scales.len())?;
        let mut out = Vec::with_capacity(acc.len());
        for (row, &s) in acc.chunks_exact(self.rows()).zip(scales) {
            let k = s * self.scale();
            out.extend(row.iter().map(|&v| k * f64::from(v)));
        }
        DenseMatrix::from_vec(scales.len(), self.rows(), out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<W> {
    pub ln1: LayerNorm,
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    pub ln2: LayerNorm,
    pub w1: W,
    pub w2: W,
}

impl<W> Block<W> {
    /// The linear weights in a fixed order with their names.
    pub fn linears(&self) -> [(&'static str, &W); 6] {
        [
            ("attn.q", &self.wq),
            ("attn.k", &self.wk),
            ("attn.v", &self.wv),
            ("attn.o", &self.wo),
            ("ffn.up", &self.w1),
            ("ffn.down", &self.w2),
        ]
    }

    fn map<V>(&self, mut f: impl FnMut(&W) -> Result<V>) -> Result<Block<V>> {
        Ok(Block {
            ln1: self.ln1.clone(),
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            ln2: self.ln2.clone(),
            w1: f(&self.w1)?,
            w2: f(&self.w2)?,
        })
    }
}

/// Encoder with linear weights of type `W`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<W> {
    config: BackboneConfig,
    vocab: Vocabulary,
    embeddings: DenseMatrix,
    blocks: Vec<Block<W>>,
    final_ln: LayerNorm,
    /// Positional encodings for every position up to the context cap.
    positions: DenseMatrix,
}

/// The deployed encoder: ternary linear layers, int8 activations.
pub type BackboneModel = Encoder<TernaryTensor>;
/// Full-precision twin with identical embeddings and norms.
pub type DenseBackbone = Encoder<DenseMatrix>;

/// Per-block intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Residual stream entering the block.
    pub input: DenseMatrix,
    /// LN1 output.
    pub u1: DenseMatrix,
    /// Attention probabilities per head, T × T.
    pub probs: Vec<DenseMatrix>,
    /// Concatenated head outputs before the output projection.
    pub attn: DenseMatrix,
    /// Residual stream after the attention branch.
    pub mid: DenseMatrix,
    /// LN2 output.
    pub u2: DenseMatrix,
    /// ReLU activations of the FFN hidden layer.
    pub hidden: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub blocks: Vec<BlockTrace>,
    /// Residual stream entering the final norm.
    pub last: DenseMatrix,
    pub latent: DenseVector,
}

pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn positional_table(d: usize) -> DenseMatrix {
    let data = (0..MAX_TOKENS)
        .flat_map(|p| positional_encoding(p, d))
        .collect();
    DenseMatrix::from_vec(MAX_TOKENS, d, data).expect("finite encodings")
}

impl<W: LinearMap> Encoder<W> {
    pub fn from_parts(
        config: BackboneConfig,
        vocab: Vocabulary,
        embeddings: DenseMatrix,
        blocks: Vec<Block<W>>,
        final_ln: LayerNorm,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_dim);
        if embeddings.rows() != vocab.len() || embeddings.cols() != d {
            return shape_err(format!(
                "embeddings are {}x{}, expected {}x{d}",
                embeddings.rows(),
                embeddings.cols(),
                vocab.len()
            ));
        }
        if blocks.len() != config.layers {
            return shape_err(format!(
                "{} blocks for {} layers",
                blocks.len(),
                config.layers
            ));
        }
        let ln_ok = |ln: &LayerNorm| ln.gain.len() == d && ln.bias.len() == d;
        for (l, b) in blocks.iter().enumerate() {
            for (name, w) in b.linears() {
                let expect = match name {
                    "ffn.up" => (f, d),
                    "ffn.down" => (d, f),
                    _ => (d, d),
                };
                if (w.out_dim(), w.in_dim()) != expect {
                    return shape_err(format!("block {l} {name} has wrong shape"));
                }
            }
            if !ln_ok(&b.ln1) || !ln_ok(&b.ln2) {
                return shape_err(format!("block {l} norm has wrong length"));
            }
        }
        if !ln_ok(&final_ln) {
            return shape_err("final norm has wrong length");
        }
        Ok(Self {
            config,
            vocab,
            embeddings,
            blocks,
            final_ln,
            positions: positional_table(d),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    pub fn blocks(&self) -> &[Block<W>] {
        &self.blocks
    }

    pub fn final_ln(&self) -> &LayerNorm {
        &self.final_ln
    }

    /// Always true: no API mutates a built encoder.
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn embed(&self, tokens: &[u32]) -> Result<DenseMatrix> {
        if tokens.is_empty() {
            return Err(Error::Invalid(
                "cannot encode an empty token sequence".into(),
            ));
        }
        if tokens.len() > MAX_TOKENS {
            return Err(Error::Invalid(format!(
                "{} tokens exceed the context of {MAX_TOKENS}",
                tokens.len()
            )));
        }
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab.len() {
                return Err(Error::Invalid(format!("token id {t} outside vocabulary")));
            }
            let pe = self.positions.row(pos).iter().copied();
            x.extend(
                self.embeddings
                    .row(t as usize)
                    .iter()
                    .zip(pe)
                    .map(|(e, p)| e + p),
            );
        }
        DenseMatrix::from_vec(tokens.len(), d, x)
    }

    fn block_forward(
        &self,
        b: &Block<W>,
        x: &DenseMatrix,
        trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<DenseMatrix> {
        let t = x.rows();
        let (d, hd) = (self.config.d_model, self.config.head_dim());
        let u1 = b.ln1.apply_rows(x);
        let [q, k, v] = W::apply_rows_shared([&b.wq, &b.wk, &b.wv], &u1)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = DenseMatrix::zeros(t, d);
        let mut probs = Vec::new();
        let mut logits = vec![0.0; t];
        for h in 0..self.config.heads {
            let cols = h * hd..(h + 1) * hd;
            let mut p_head = Vec::with_capacity(t * t);
            for i in 0..t {
                let qi = &q.row(i)[cols.clone()];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *l = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let p = softmax(&logits);
                let out = &mut attn.row_mut(i)[cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += pj * vv;
                    }
                }
                if trace.is_some() {
                    p_head.extend(p.iter());
                }
            }
            if trace.is_some() {
                probs.push(DenseMatrix::from_vec(t, t, p_head)?);
            }
        }
        let mut mid = b.wo.apply_rows(&attn)?;
        for (m, xv) in mid.data_mut().iter_mut().zip(x.data()) {
            *m += xv;
        }
        let u2 = b.ln2.apply_rows(&mid);
        let mut hidden = b.w1.apply_rows(&u2)?;
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let mut out = b.w2.apply_rows(&hidden)?;
        for (o, m) in out.data_mut().iter_mut().zip(mid.data()) {
            *o += m;
        }
        if let Some(tr) = trace {
            tr.push(BlockTrace {
                input: x.clone(),
                u1,
                probs,
                attn,
                mid,
                u2,
                hidden,
            });
        }
        Ok(out)
    }

    fn run(
        &self,
        tokens: &[u32],
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<(DenseMatrix, DenseVector)> {
        let mut x = self.embed(tokens)?;
        for b in &self.blocks {
            x = self.block_forward(b, &x, trace.as_deref_mut())?;
        }
        let z = self.final_ln.apply_rows(&x);
        let t = z.rows() as f64;
        let mut h = vec![0.0; z.cols()];
        for i in 0..z.rows() {
            for (a, v) in h.iter_mut().zip(z.row(i)) {
                *a += v;
            }
        }
        for a in &mut h {
            *a /= t;
        }
        let h = DenseVector::new(h)?;
        Ok((x, h))
    }

    /// Mean-pooled final representation of `tokens`.
    pub fn encode(&self, tokens: &[u32]) -> Result<DenseVector> {
        Ok(self.run(tokens, None)?.1)
    }

    pub fn encode_traced(&self, tokens: &[u32]) -> Result<Trace> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let (last, latent) = self.run(tokens, Some(&mut blocks))?;
        Ok(Trace {
            blocks,
            last,
            latent,
        })
    }

    /// Copy with replaced embeddings, for perturbation experiments.
    pub fn with_embeddings(&self, embeddings: DenseMatrix) -> Result<Self>
    where
        W: Clone,
    {
        Self::from_parts(
            self.config,
            self.vocab.clone(),
            embeddings,
            self.blocks.clone(),
            self.final_ln.clone(),
        )
    }
}

impl BackboneModel {
    /// Dense encoder with each ternary weight replaced by `α·T`.
    pub fn dequantized(&self) -> DenseBackbone {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.map(|w| Ok(dequantize(w))))
            .collect::<Result<Vec<_>>>()
            .expect("infallible");
        Encoder {
            config: self.config,
            vocab: self.vocab.clone(),
            embeddings: self.embeddings.clone(),
            blocks,
            final_ln: self.final_ln.clone(),
            positions: self.positions.clone(),
        }
    }

    pub fn linear_count(&self) -> usize {
        6 * self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.config.d_model;
        let linear: usize = self
            .blocks
            .iter()
            .flat_map(|b| b.linears())
            .map(|(_, w)| w.len())
            .sum();
        self.embeddings.len() + linear + self.blocks.len() * 4 * d + 2 * d
    }
}

impl DenseBackbone {
    /// Quantizes every linear layer with `cfg`, keeping embeddings and norms.
    pub fn quantize(&self, cfg: &QuantConfig) -> Result<BackboneModel> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.map(|w| quantize(w, cfg)))
            .collect::<Result<Vec<_>>>()?;
        let mut config = self.config;
        config.quant = *cfg;
        Ok(Encoder {
            config,
            vocab: self.vocab.clone(),
            embeddings: self.embeddings.clone(),
            blocks,
            final_ln: self.final_ln.clone(),
            positions: self.positions.clone(),
        })
    }

    /// Perturbation of each linear layer and of all of them concatenated.
    pub fn perturbation(
        &self,
        quantized: &BackboneModel,
    ) -> Result<(Vec<PerturbationReport>, PerturbationReport)> {
        if self.blocks.len() != quantized.blocks.len()
            || self.config.d_model != quantized.config.d_model
        {
            return shape_err("backbone architectures differ");
        }
        let mut parts = Vec::new();
        for (a, b) in self.blocks.iter().zip(&quantized.blocks) {
            for ((_, wa), (_, wb)) in a.linears().into_iter().zip(b.linears()) {
                parts.push(perturbation_between(wa, wb)?);
            }
        }
        let total = PerturbationReport::concatenate(&parts)?;
        Ok((parts, total))
    }
}

/// Draws an FP encoder and its ternary copy.
///
/// Embeddings are iid N(0, 1); linear weights are N(0, 1/fan-in); norms start
/// at unit gain and zero bias.
pub fn build_backbone(
    cfg: &BackboneConfig,
    rng: &mut RngStream,
) -> Result<(BackboneModel, DenseBackbone)> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let embeddings = DenseMatrix::from_fn(vocab.len(), d, |_, _| rng.normal());
    let mut gaussian = |rows: usize, cols: usize| {
        let s = 1.0 / (cols as f64).sqrt();
        DenseMatrix::from_fn(rows, cols, |_, _| s * rng.normal())
    };
    let blocks = (0..cfg.layers)
        .map(|_| Block {
            ln1: LayerNorm::identity(d),
            wq: gaussian(d, d),
            wk: gaussian(d, d),
            wv: gaussian(d, d),
            wo: gaussian(d, d),
            ln2: LayerNorm::identity(d),
            w1: gaussian(f, d),
            w2: gaussian(d, f),
        })
        .collect();
    let dense = DenseBackbone::from_parts(*cfg, vocab, embeddings, blocks, LayerNorm::identity(d))?;
    let model = dense.quantize(&cfg.quant)?;
    Ok((model, dense))
}
