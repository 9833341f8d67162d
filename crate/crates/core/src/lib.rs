//! Extract-retrieve-generate augmentation of stylized image-caption corpora.
//!
//! A small stylized corpus is annotated with attention-selected style
//! phrases, indexed by image and caption embeddings, and used to graft those
//! phrases onto the captions of a large factual corpus. Generated captions
//! survive only if a classifier agrees on their style, a per-style trigram
//! model finds them fluent, and the scene they were retrieved from is close
//! enough.
//!
//! Numeric code is generic over [`num::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the pipeline and the file
//! formats use.

pub mod backends;
pub mod data;
pub mod distribution;
pub mod extractor;
pub mod filter;
pub mod generator;
pub mod lm;
pub mod num;
pub mod pipeline;
pub mod retriever;
pub mod seed;

pub type Profile = extractor::AttentionProfile<f64>;
pub type Distribution = distribution::LabelDistribution<f64>;
pub type Embedding = retriever::EmbeddingVector<f64>;
pub type Index = retriever::SceneIndex<f64>;
pub type ScoredNeighbor = retriever::Neighbor<f64>;
pub type Confidence = extractor::ConfidenceRecord<f64>;
