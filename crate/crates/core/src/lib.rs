//! Multilingual entity linking by dense retrieval.
//!
//! A mention encoder and an entity encoder map mentions (in any language) and
//! entities of a language-agnostic knowledge base into one space, scored by
//! cosine similarity. The crate covers the whole loop: KB and corpus
//! ingestion, subword tokenization, transformer towers with exact gradients,
//! in-batch softmax training with an auxiliary cross-lingual entity task and
//! per-entity balanced hard-negative mining, exact top-k retrieval, an
//! alias-table baseline, a cross-attention reranker, and frequency-binned
//! recall evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root name the two concrete instantiations.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kb;
pub mod model;
pub mod rerank;
pub mod retrieval;
pub mod scalar;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder32 = model::Encoder<f32>;
pub type Encoder64 = model::Encoder<f64>;
pub type DualEncoder32 = model::DualEncoder<f32>;
pub type DualEncoder64 = model::DualEncoder<f64>;
pub type EntityIndex32 = retrieval::EntityIndex<f32>;
pub type EntityIndex64 = retrieval::EntityIndex<f64>;
pub type CrossEncoder32 = rerank::CrossEncoder<f32>;
pub type CrossEncoder64 = rerank::CrossEncoder<f64>;
