//! Model backend contracts and their implementations.
//!
//! The pipeline only ever talks to the three traits below. Implementations
//! are either the deterministic in-process reference backends in
//! [`reference`] or an out-of-process adapter speaking the line-delimited
//! JSON protocol in [`wire`]. [`connect`] turns a descriptor string into a
//! handle and validates the advertised capabilities before any work starts.

pub mod contract;
mod descriptor;
pub mod reference;
pub mod wire;

pub use descriptor::{
    connect_classifier, connect_embedder, connect_generator, ConnectOptions, Descriptor,
    ReferenceKind,
};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ImageRef, StyleLabel};
use crate::distribution::LabelDistribution;
use crate::extractor::AttentionProfile;
use crate::generator::{EmotionPrompt, FineTunePair};
use crate::num::Scalar;
use crate::retriever::EmbeddingVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("backend error {code}: {message}")]
    Remote { code: i64, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("capability mismatch: {0}")]
    Capability(String),
    #[error("invalid backend output: {0}")]
    InvalidOutput(String),
    #[error("bad backend descriptor: {0}")]
    Descriptor(String),
}

impl BackendError {
    /// Errors after which the connection is unusable.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::Timeout(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierCapabilities {
    pub labels: Vec<StyleLabel>,
    pub head_count: usize,
    pub layer_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderCapabilities {
    pub dimension: usize,
    pub modalities: Vec<Modality>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorCapabilities {
    pub deterministic: bool,
    pub seedable: bool,
}

/// A style classifier that also exposes the attention of its classification
/// anchor token over the caption words.
pub trait ClassifierBackend<T: Scalar>: Send + Sync {
    fn capabilities(&self) -> &ClassifierCapabilities;

    fn classify(&self, tokens: &[String]) -> Result<LabelDistribution<T>, BackendError>;

    /// Word-level attention for every head and layer.
    fn attention(&self, tokens: &[String]) -> Result<AttentionProfile<T>, BackendError>;
}

/// A shared text/image encoder.
pub trait EmbedderBackend<T: Scalar>: Send + Sync {
    fn capabilities(&self) -> &EmbedderCapabilities;

    fn embed_text(&self, tokens: &[String]) -> Result<EmbeddingVector<T>, BackendError>;

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector<T>, BackendError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneAck {
    pub accepted: usize,
}

pub trait GeneratorBackend: Send + Sync {
    fn capabilities(&self) -> &GeneratorCapabilities;

    fn generate(&self, prompt: &EmotionPrompt, seed: u64) -> Result<Vec<String>, BackendError>;

    fn finetune(&self, pairs: &[FineTunePair]) -> Result<FinetuneAck, BackendError>;
}

impl<T: Scalar, B: ClassifierBackend<T> + ?Sized> ClassifierBackend<T> for Box<B> {
    fn capabilities(&self) -> &ClassifierCapabilities {
        (**self).capabilities()
    }
    fn classify(&self, tokens: &[String]) -> Result<LabelDistribution<T>, BackendError> {
        (**self).classify(tokens)
    }
    fn attention(&self, tokens: &[String]) -> Result<AttentionProfile<T>, BackendError> {
        (**self).attention(tokens)
    }
}

impl<T: Scalar, B: EmbedderBackend<T> + ?Sized> EmbedderBackend<T> for Box<B> {
    fn capabilities(&self) -> &EmbedderCapabilities {
        (**self).capabilities()
    }
    fn embed_text(&self, tokens: &[String]) -> Result<EmbeddingVector<T>, BackendError> {
        (**self).embed_text(tokens)
    }
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector<T>, BackendError> {
        (**self).embed_image(image)
    }
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for Box<B> {
    fn capabilities(&self) -> &GeneratorCapabilities {
        (**self).capabilities()
    }
    fn generate(&self, prompt: &EmotionPrompt, seed: u64) -> Result<Vec<String>, BackendError> {
        (**self).generate(prompt, seed)
    }
    fn finetune(&self, pairs: &[FineTunePair]) -> Result<FinetuneAck, BackendError> {
        (**self).finetune(pairs)
    }
}
