//! State serialization, tokenization and the frozen encoder.

pub mod encoder;
pub mod serialize;
pub mod tokenizer;

pub use encoder::{
    build_backbone, BackboneConfig, BackboneModel, Block, DenseBackbone, Encoder, LayerNorm,
    LinearMap, LN_EPS,
};
pub use serialize::{serialize_state, Template};
pub use tokenizer::{tokenize, Vocabulary, MAX_TOKENS};
