//! Domain records shared by every stage, plus tokenization and JSONL corpora.

pub(crate) mod corpus;
mod labels;
mod tokenize;
mod types;

pub use corpus::{
    load_corpus, read_corpus, save_corpus, write_corpus, CorpusError, CorpusKind, CorpusRecord,
    LineError, ValidationContext,
};
pub use labels::{LabelSet, StyleLabel};
pub use tokenize::{detokenize, tokenize, Punctuation, Tokenizer};
pub use types::{
    AnnotatedStylizedSample, AugmentedPair, Caption, FactualPair, FilterScores, ImageRef,
    Provenance, RetrievalMode, StylizedSample,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("empty caption")]
    EmptyCaption,
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("label '{0}' is not in the configured label set")]
    UnknownLabel(String),
    #[error("'{0}' is the factual label, a stylized sample needs a style label")]
    FactualStyle(String),
    #[error("style phrase and residual do not partition the caption tokens")]
    BrokenPartition,
    #[error("style phrase is empty")]
    EmptyPhrase,
    #[error("unknown retrieval mode '{0}'")]
    UnknownMode(String),
    #[error("{0}")]
    Invalid(String),
}
