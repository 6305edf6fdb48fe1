//! The BTRL checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BTRL" | version u32 | meta_len u32 | meta (key=value lines)
//! | tensor_count u32 | tensor records | vocab_count u32 | vocab tokens
//! | sha256 of everything before it (32 bytes)
//! ```
//!
//! A tensor record is `name_len u32 | name | rank u32 | dims u32* | dtype u8
//! | scale f64 (ternary only) | payload`, with FP32 payloads of `4·n` bytes and
//! ternary payloads of `ceil(n/4)` packed bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Block, DenseBackbone, Encoder, LayerNorm, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::{Activation, HeadParams};
use crate::quant::{QuantConfig, ScaleMode, TernaryTensor, Threshold};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"BTRL";
pub const VERSION: u32 = 1;
pub const DTYPE_FP32: u8 = 0;
pub const DTYPE_TERNARY: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Fp32(Vec<f32>),
    Ternary { scale: f64, packed: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn fp32(name: impl Into<String>, dims: Vec<usize>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::Fp32(values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn ternary(name: impl Into<String>, t: &TernaryTensor) -> Self {
        Self {
            name: name.into(),
            dims: vec![t.rows(), t.cols()],
            data: TensorData::Ternary {
                scale: t.scale(),
                packed: t.packed().to_vec(),
            },
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_ternary(&self) -> bool {
        matches!(self.data, TensorData::Ternary { .. })
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::Fp32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::Ternary { .. } => Err(Error::Format(format!(
                "tensor {} is ternary, expected FP32",
                self.name
            ))),
        }
    }

    pub fn matrix(&self) -> Result<DenseMatrix> {
        let (r, c) = self.shape2()?;
        match &self.data {
            TensorData::Fp32(_) => DenseMatrix::from_vec(r, c, self.values()?),
            TensorData::Ternary { .. } => Ok(crate::quant::dequantize(&self.ternary_tensor()?)),
        }
    }

    pub fn ternary_tensor(&self) -> Result<TernaryTensor> {
        let (r, c) = self.shape2()?;
        match &self.data {
            TensorData::Ternary { scale, packed } => {
                TernaryTensor::from_packed(r, c, packed.clone(), *scale)
            }
            TensorData::Fp32(_) => Err(Error::Format(format!(
                "tensor {} is FP32, expected ternary",
                self.name
            ))),
        }
    }

    fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Format(format!("tensor {} is not rank 2", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
    pub vocab: Vec<String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(Error::Format(format!(
                "length {n} exceeds the remaining input"
            )));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata key {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
                return Err(Error::Format(format!(
                    "metadata entry {k:?} is not encodable"
                )));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        put_str(&mut out, &meta)?;
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            put_str(&mut out, &t.name)?;
            put_u32(&mut out, t.dims.len())?;
            for &d in &t.dims {
                put_u32(&mut out, d)?;
            }
            let n = t.numel();
            match &t.data {
                TensorData::Fp32(v) => {
                    if v.len() != n {
                        return Err(Error::Format(format!("tensor {} payload length", t.name)));
                    }
                    out.push(DTYPE_FP32);
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::Ternary { scale, packed } => {
                    if packed.len() != n.div_ceil(4) {
                        return Err(Error::Format(format!("tensor {} payload length", t.name)));
                    }
                    out.push(DTYPE_TERNARY);
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(packed);
                }
            }
        }
        put_u32(&mut out, self.vocab.len())?;
        for tok in &self.vocab {
            put_str(&mut out, tok)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a BTRL checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.len()?;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = match r.u8()? {
                DTYPE_FP32 => {
                    let raw = r.take(
                        n.checked_mul(4)
                            .ok_or_else(|| Error::Format("size overflow".into()))?,
                    )?;
                    TensorData::Fp32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                }
                DTYPE_TERNARY => {
                    let scale = r.f64()?;
                    let packed = r.take(n.div_ceil(4))?.to_vec();
                    TensorData::Ternary { scale, packed }
                }
                other => {
                    return Err(Error::Format(format!(
                        "tensor {name} has unknown dtype {other}"
                    )))
                }
            };
            tensors.push(TensorRecord { name, dims, data });
        }
        let vocab_len = r.u32()? as usize;
        let vocab = (0..vocab_len)
            .map(|_| r.string())
            .collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after vocabulary".into()));
        }
        Ok(Self {
            meta,
            tensors,
            vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Number of serialized bytes.
    pub fn size(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }
}

/// A backbone read back from a checkpoint in whichever precision it was stored.
#[derive(Debug, Clone)]
pub enum StoredBackbone {
    Ternary(Encoder<TernaryTensor>),
    Dense(DenseBackbone),
}

fn quant_meta(q: &QuantConfig) -> (String, String) {
    let t = match q.threshold {
        Threshold::AbsMeanFraction(f) => format!("absmean:{f:?}"),
        Threshold::Fixed(t) => format!("fixed:{t:?}"),
    };
    let s = match q.scale {
        ScaleMode::AbsMean => "absmean",
        ScaleMode::None => "none",
    };
    (t, s.to_string())
}

fn parse_quant(threshold: &str, scale: &str) -> Result<QuantConfig> {
    let bad = || Error::Format(format!("bad quantizer metadata {threshold:?}/{scale:?}"));
    let (kind, v) = threshold.split_once(':').ok_or_else(bad)?;
    let v: f64 = v.parse().map_err(|_| bad())?;
    let threshold = match kind {
        "absmean" => Threshold::AbsMeanFraction(v),
        "fixed" => Threshold::Fixed(v),
        _ => return Err(bad()),
    };
    let scale = match scale {
        "absmean" => ScaleMode::AbsMean,
        "none" => ScaleMode::None,
        _ => return Err(bad()),
    };
    Ok(QuantConfig { threshold, scale })
}

fn norm_records(out: &mut Vec<TensorRecord>, prefix: &str, ln: &LayerNorm) {
    let d = ln.gain.len();
    out.push(TensorRecord::fp32(
        format!("{prefix}.gain"),
        vec![d],
        &ln.gain,
    ));
    out.push(TensorRecord::fp32(
        format!("{prefix}.bias"),
        vec![d],
        &ln.bias,
    ));
}

fn read_norm(ck: &Checkpoint, prefix: &str) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: ck.get(&format!("{prefix}.gain"))?.values()?,
        bias: ck.get(&format!("{prefix}.bias"))?.values()?,
    })
}

fn encoder_records<W>(
    enc: &Encoder<W>,
    linear: impl Fn(String, &W) -> TensorRecord,
    ck: &mut Checkpoint,
) where
    W: crate::backbone::LinearMap,
{
    let cfg = enc.config();
    let (threshold, scale) = quant_meta(&cfg.quant);
    for (k, v) in [
        ("backbone.layers", cfg.layers.to_string()),
        ("backbone.d_model", cfg.d_model.to_string()),
        ("backbone.heads", cfg.heads.to_string()),
        ("backbone.ffn_dim", cfg.ffn_dim.to_string()),
        ("backbone.quant_threshold", threshold),
        ("backbone.quant_scale", scale),
    ] {
        ck.meta.insert(k.to_string(), v);
    }
    let e = enc.embeddings();
    ck.tensors.push(TensorRecord::fp32(
        "embed",
        vec![e.rows(), e.cols()],
        e.data(),
    ));
    for (l, b) in enc.blocks().iter().enumerate() {
        norm_records(&mut ck.tensors, &format!("block{l}.ln1"), &b.ln1);
        norm_records(&mut ck.tensors, &format!("block{l}.ln2"), &b.ln2);
        for (name, w) in b.linears() {
            ck.tensors.push(linear(format!("block{l}.{name}"), w));
        }
    }
    norm_records(&mut ck.tensors, "final_ln", enc.final_ln());
    ck.vocab = enc.vocab().tokens().to_vec();
}

/// Adds the ternary encoder's tensors, metadata and vocabulary.
pub fn put_backbone(ck: &mut Checkpoint, model: &Encoder<TernaryTensor>) {
    encoder_records(model, TensorRecord::ternary, ck);
}

/// Adds the FP encoder, every linear layer stored as FP32.
pub fn put_dense_backbone(ck: &mut Checkpoint, model: &DenseBackbone) {
    encoder_records(
        model,
        |n, w| TensorRecord::fp32(n, vec![w.rows(), w.cols()], w.data()),
        ck,
    );
}

pub fn backbone_config(ck: &Checkpoint) -> Result<BackboneConfig> {
    let num = |k: &str| -> Result<usize> {
        ck.meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata {k} is not an integer")))
    };
    let cfg = BackboneConfig {
        layers: num("backbone.layers")?,
        d_model: num("backbone.d_model")?,
        heads: num("backbone.heads")?,
        ffn_dim: num("backbone.ffn_dim")?,
        quant: parse_quant(
            ck.meta("backbone.quant_threshold")?,
            ck.meta("backbone.quant_scale")?,
        )?,
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(cfg)
}

/// Reads the encoder; all linear layers must share one dtype.
pub fn get_backbone(ck: &Checkpoint) -> Result<StoredBackbone> {
    let cfg = backbone_config(ck)?;
    let vocab = Vocabulary::from_tokens(ck.vocab.clone())?;
    let embeddings = ck.get("embed")?.matrix()?;
    let ternary = ck.get("block0.attn.q")?.is_ternary();
    let names = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"];
    let final_ln = read_norm(ck, "final_ln")?;
    macro_rules! blocks {
        ($read:expr) => {
            (0..cfg.layers)
                .map(|l| {
                    let mut ws = Vec::with_capacity(6);
                    for n in names {
                        let rec = ck.get(&format!("block{l}.{n}"))?;
                        if rec.is_ternary() != ternary {
                            return Err(Error::Format("linear layers mix dtypes".into()));
                        }
                        ws.push($read(rec)?);
                    }
                    let mut it = ws.into_iter();
                    let mut next = || it.next().expect("six weights");
                    Ok(Block {
                        ln1: read_norm(ck, &format!("block{l}.ln1"))?,
                        wq: next(),
                        wk: next(),
                        wv: next(),
                        wo: next(),
                        ln2: read_norm(ck, &format!("block{l}.ln2"))?,
                        w1: next(),
                        w2: next(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
    }
    let wrap = |e: Error| match e {
        Error::Shape(m) => Error::Format(m),
        other => other,
    };
    if ternary {
        let blocks = blocks!(|r: &TensorRecord| r.ternary_tensor())?;
        Encoder::from_parts(cfg, vocab, embeddings, blocks, final_ln)
            .map(StoredBackbone::Ternary)
            .map_err(wrap)
    } else {
        let blocks = blocks!(|r: &TensorRecord| r.matrix())?;
        Encoder::from_parts(cfg, vocab, embeddings, blocks, final_ln)
            .map(StoredBackbone::Dense)
            .map_err(wrap)
    }
}

/// Adds a head under `prefix` as FP32 tensors.
pub fn put_head(ck: &mut Checkpoint, prefix: &str, head: &HeadParams) {
    for (l, (w, b)) in head.weights.iter().zip(&head.biases).enumerate() {
        ck.tensors.push(TensorRecord::fp32(
            format!("{prefix}.w{l}"),
            vec![w.rows(), w.cols()],
            w.data(),
        ));
        ck.tensors.push(TensorRecord::fp32(
            format!("{prefix}.b{l}"),
            vec![b.len()],
            b,
        ));
    }
}

pub fn get_head(ck: &Checkpoint, prefix: &str) -> Result<HeadParams> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..3 {
        let w = ck.get(&format!("{prefix}.w{l}"))?.matrix()?;
        let b = ck.get(&format!("{prefix}.b{l}"))?.values()?;
        if b.len() != w.rows()
            || weights
                .last()
                .is_some_and(|p: &DenseMatrix| p.rows() != w.cols())
        {
            return Err(Error::Format(format!(
                "head {prefix} layer {l} has inconsistent shapes"
            )));
        }
        weights.push(w);
        biases.push(b);
    }
    Ok(HeadParams {
        weights,
        biases,
        activation: Activation::Tanh,
    })
}

pub fn has_tensor(ck: &Checkpoint, name: &str) -> bool {
    ck.tensors.iter().any(|t| t.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;
    use crate::rng::RngStream;

    fn small() -> (Encoder<TernaryTensor>, DenseBackbone) {
        build_backbone(&BackboneConfig::small(), &mut RngStream::new(3, 1)).unwrap()
    }

    #[test]
    fn header_bytes_are_pinned() {
        let bytes = Checkpoint::default().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"BTRL");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        // empty metadata, zero tensors, zero tokens, digest
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 32);
    }

    #[test]
    fn record_layout_is_pinned() {
        let t = TernaryTensor::from_trits(1, 4, &[1, -1, 0, 1], 0.5).unwrap();
        let ck = Checkpoint {
            tensors: vec![TensorRecord::ternary("w", &t)],
            ..Default::default()
        };
        let bytes = ck.to_bytes().unwrap();
        let rec = &bytes[16..bytes.len() - 4 - 32];
        let mut expect = vec![1, 0, 0, 0, b'w', 2, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0, 1];
        expect.extend_from_slice(&0.5f64.to_le_bytes());
        expect.push(0x49);
        assert_eq!(rec, &expect[..]);
    }

    #[test]
    fn ternary_backbone_round_trips_exactly() {
        let (model, _) = small();
        let mut ck = Checkpoint::default();
        put_backbone(&mut ck, &model);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        match get_backbone(&back).unwrap() {
            StoredBackbone::Ternary(m) => {
                for (a, b) in m.blocks().iter().zip(model.blocks()) {
                    assert_eq!(a.wq, b.wq);
                    assert_eq!(a.w2, b.w2);
                }
                assert_eq!(m.config(), model.config());
            }
            StoredBackbone::Dense(_) => panic!("expected ternary"),
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn dense_backbone_round_trips_to_fp32_precision() {
        let (_, dense) = small();
        let mut ck = Checkpoint::default();
        put_dense_backbone(&mut ck, &dense);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let StoredBackbone::Dense(d) = get_backbone(&back).unwrap() else {
            panic!("expected dense");
        };
        for (a, b) in d.blocks()[0]
            .w1
            .data()
            .iter()
            .zip(dense.blocks()[0].w1.data())
        {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn heads_round_trip() {
        let head = HeadParams::policy(64, 3, &mut RngStream::new(1, 0)).unwrap();
        let mut ck = Checkpoint::default();
        put_head(&mut ck, "policy", &head);
        let back = get_head(
            &Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(),
            "policy",
        )
        .unwrap();
        assert_eq!(back.output_dim(), 3);
        let diff = back.weights[1].sub(&head.weights[1]).unwrap().norm_inf();
        assert!(diff < 1e-6);
    }

    #[test]
    fn corruption_is_detected() {
        let (model, _) = small();
        let mut ck = Checkpoint::default();
        put_backbone(&mut ck, &model);
        let bytes = ck.to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::Format(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn ternary_checkpoint_is_much_smaller() {
        let (model, dense) =
            build_backbone(&BackboneConfig::default(), &mut RngStream::new(0, 1)).unwrap();
        let mut t = Checkpoint::default();
        put_backbone(&mut t, &model);
        let mut f = Checkpoint::default();
        put_dense_backbone(&mut f, &dense);
        let ratio = f.size().unwrap() as f64 / t.size().unwrap() as f64;
        assert!(ratio > 8.0, "ratio {ratio}");
    }

    #[test]
    fn missing_tensor_and_bad_metadata_are_format_errors() {
        let (model, _) = small();
        let mut ck = Checkpoint::default();
        put_backbone(&mut ck, &model);
        let mut missing = ck.clone();
        missing.tensors.retain(|t| t.name != "block1.ffn.up");
        assert!(matches!(get_backbone(&missing), Err(Error::Format(_))));
        let mut bad = ck.clone();
        bad.meta.insert("backbone.layers".into(), "x".into());
        assert!(matches!(get_backbone(&bad), Err(Error::Format(_))));
    }
}
