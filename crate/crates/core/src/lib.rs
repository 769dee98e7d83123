//! Text-based knowledge graph completion with a contrastively trained
//! bi-encoder.
//!
//! The pipeline is: load a graph ([`kg`]), encode `(head, relation)` queries
//! and candidate entities with two embedding-bag towers ([`encoder`]), train
//! with in-batch, pre-batch and self negatives ([`contrastive`],
//! [`trainer`]), then rank every entity for each test query ([`ranking`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod checkpoint;
pub mod contrastive;
pub mod encoder;
pub mod kg;
pub mod ranking;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use contrastive::{LossConfig, LossKind};
pub use encoder::{CountingEncoder, Encoder, EncoderConfig, PrecomputedEncoder, ReferenceEncoder};
pub use kg::{
    load_graph, DatasetPaths, EntityId, GraphBuilder, KnowledgeGraph, RelationCategory,
    RelationId, Split, Triple,
};
pub use ranking::{Direction, EvalReport, Metrics, RerankConfig};
pub use scalar::Scalar;
pub use seed::SeedStreams;
pub use trainer::{NegativeSet, TrainConfig, TrainError};

pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type GradientBuffer64 = encoder::GradientBuffer<f64>;
pub type GradientBuffer32 = encoder::GradientBuffer<f32>;
pub type CandidateMatrix64 = contrastive::CandidateMatrix<f64>;
pub type CandidateMatrix32 = contrastive::CandidateMatrix<f32>;
pub type PreBatchQueue64 = contrastive::PreBatchQueue<f64>;
pub type PreBatchQueue32 = contrastive::PreBatchQueue<f32>;
pub type Trainer64<'g> = trainer::Trainer<'g, f64>;
pub type Trainer32<'g> = trainer::Trainer<'g, f32>;
pub type EntityEmbeddingIndex64 = ranking::EntityEmbeddingIndex<f64>;
pub type EntityEmbeddingIndex32 = ranking::EntityEmbeddingIndex<f32>;
