//! Attention-based style phrase extraction.
//!
//! Every caption token is scored by the attention its classifier's anchor
//! token pays to it at one (head, layer). The head/layer is chosen once per
//! corpus: for each candidate the top-ε tokens of every caption are deleted,
//! the reduced caption is reclassified, and the candidate whose deletions
//! leave the classifier least confident about the original style wins. That
//! head/layer then decides the style phrase of each caption.

use std::collections::HashMap;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ClassifierBackend};
use crate::data::{
    AnnotatedStylizedSample, Caption, DataError, LabelSet, StyleLabel, StylizedSample,
};
use crate::distribution::{LabelDistribution, MASS_TOLERANCE};
use crate::num::Scalar;

/// Floor of the confidence denominator.
pub const CONFIDENCE_FLOOR: f64 = 1e-12;

/// Default extraction proportion.
pub const DEFAULT_EPSILON: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("attention profile: {0}")]
    Profile(String),
    #[error("head {head}, layer {layer} outside {head_count} heads x {layer_count} layers")]
    HeadLayerOutOfRange {
        head: usize,
        layer: usize,
        head_count: usize,
        layer_count: usize,
    },
    #[error("caption of {0} token(s) cannot yield both a phrase and a residual")]
    CaptionTooShort(usize),
    #[error("removal set must be a non-empty proper subset of the caption tokens")]
    BadRemoval,
    #[error("label '{0}' missing from the classifier distribution")]
    UnknownLabel(String),
    #[error("extraction proportion {0} outside (0, 1)")]
    BadEpsilon(f64),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no caption has at least two tokens")]
    NoEligibleCaption,
    #[error("sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Attention weights indexed `[head][layer][token]`, each (head, layer) row a
/// probability distribution over the caption tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AttentionProfile<T> {
    head_count: usize,
    layer_count: usize,
    token_count: usize,
    weights: Vec<T>,
}

impl<T: Scalar> AttentionProfile<T> {
    /// Builds from a flat `[head][layer][token]` buffer of normalized rows.
    pub fn new(
        head_count: usize,
        layer_count: usize,
        token_count: usize,
        weights: Vec<T>,
    ) -> Result<Self, ExtractError> {
        if head_count == 0 || layer_count == 0 || token_count == 0 {
            return Err(ExtractError::Profile("zero-sized dimension".into()));
        }
        if weights.len() != head_count * layer_count * token_count {
            return Err(ExtractError::Profile(format!(
                "{} weights for {head_count}x{layer_count}x{token_count}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(ExtractError::Profile("negative or non-finite weight".into()));
        }
        for (i, row) in weights.chunks(token_count).enumerate() {
            let sum: T = row.iter().copied().sum();
            let sum = sum.to_f64_lossy();
            if (sum - 1.0).abs() > MASS_TOLERANCE {
                return Err(ExtractError::Profile(format!(
                    "row (head {}, layer {}) sums to {sum}",
                    i / layer_count,
                    i % layer_count
                )));
            }
        }
        Ok(Self {
            head_count,
            layer_count,
            token_count,
            weights,
        })
    }

    /// Builds from `[head][layer][token]` nested rows.
    pub fn from_nested(rows: Vec<Vec<Vec<T>>>) -> Result<Self, ExtractError> {
        let heads = rows.len();
        let layers = rows.first().map_or(0, Vec::len);
        let tokens = rows.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(heads * layers * tokens);
        for head in rows {
            if head.len() != layers {
                return Err(ExtractError::Profile("ragged layer dimension".into()));
            }
            for row in head {
                if row.len() != tokens {
                    return Err(ExtractError::Profile("ragged token dimension".into()));
                }
                flat.extend(row);
            }
        }
        Self::new(heads, layers, tokens, flat)
    }

    /// Normalizes each row of raw non-negative scores to sum to one.
    pub fn normalized(
        head_count: usize,
        layer_count: usize,
        token_count: usize,
        mut scores: Vec<T>,
    ) -> Result<Self, ExtractError> {
        if token_count == 0 {
            return Err(ExtractError::Profile("zero-sized dimension".into()));
        }
        for row in scores.chunks_mut(token_count) {
            let sum: T = row.iter().copied().sum();
            if !(sum > T::zero()) {
                return Err(ExtractError::Profile("row with no positive weight".into()));
            }
            row.iter_mut().for_each(|w| *w = *w / sum);
        }
        Self::new(head_count, layer_count, token_count, scores)
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn row(&self, hl: HeadLayerId) -> Result<&[T], ExtractError> {
        self.check(hl)?;
        let start = (hl.head * self.layer_count + hl.layer) * self.token_count;
        Ok(&self.weights[start..start + self.token_count])
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<T>>> {
        self.weights
            .chunks(self.token_count * self.layer_count)
            .map(|head| head.chunks(self.token_count).map(<[T]>::to_vec).collect())
            .collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> AttentionProfile<U> {
        AttentionProfile {
            head_count: self.head_count,
            layer_count: self.layer_count,
            token_count: self.token_count,
            weights: self.weights.iter().map(|&w| f(w)).collect(),
        }
    }

    fn check(&self, hl: HeadLayerId) -> Result<(), ExtractError> {
        if hl.head < self.head_count && hl.layer < self.layer_count {
            Ok(())
        } else {
            Err(ExtractError::HeadLayerOutOfRange {
                head: hl.head,
                layer: hl.layer,
                head_count: self.head_count,
                layer_count: self.layer_count,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadLayerId {
    pub head: usize,
    pub layer: usize,
}

impl HeadLayerId {
    pub fn new(head: usize, layer: usize) -> Self {
        Self { head, layer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub epsilon: f64,
    #[serde(default = "one")]
    pub min_phrase_len: usize,
    /// Count the factual label among the competing labels of the confidence
    /// score. Off by default.
    #[serde(default)]
    pub factual_in_denominator: bool,
}

fn one() -> usize {
    1
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            min_phrase_len: 1,
            factual_in_denominator: false,
        }
    }
}

impl ExtractorConfig {
    pub fn with_epsilon(epsilon: f64) -> Result<Self, ExtractError> {
        let cfg = Self {
            epsilon,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ExtractError::BadEpsilon(self.epsilon));
        }
        if self.min_phrase_len == 0 {
            return Err(ExtractError::Profile("min_phrase_len must be positive".into()));
        }
        Ok(())
    }
}

/// Mean confidence of the corpus captions after deleting their top-ε tokens
/// at one head/layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConfidenceRecord<T> {
    pub head_layer: HeadLayerId,
    pub mean_confidence: T,
}

/// Number of words taken as the style phrase of a `token_count`-word caption:
/// `ε·T` rounded half up, clamped to `[min_len, T − 1]`.
pub fn phrase_len(epsilon: f64, token_count: usize, min_len: usize) -> Result<usize, ExtractError> {
    if token_count < 2 {
        return Err(ExtractError::CaptionTooShort(token_count));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ExtractError::BadEpsilon(epsilon));
    }
    // The slack absorbs representation error in products such as 0.35 * 10.
    let rounded = (epsilon * token_count as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(rounded.max(min_len.max(1)).min(token_count - 1))
}

/// Indices of the `phrase_len` highest-weighted tokens at `hl`, in sentence
/// order. Equal weights go to the smaller index.
pub fn top_epsilon_tokens<T: Scalar>(
    profile: &AttentionProfile<T>,
    hl: HeadLayerId,
    epsilon: f64,
) -> Result<Vec<usize>, ExtractError> {
    top_tokens(profile, hl, phrase_len(epsilon, profile.token_count(), 1)?)
}

fn top_tokens<T: Scalar>(
    profile: &AttentionProfile<T>,
    hl: HeadLayerId,
    n: usize,
) -> Result<Vec<usize>, ExtractError> {
    let row = profile.row(hl)?;
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let rank = |&a: &usize, &b: &usize| {
        row[b]
            .partial_cmp(&row[a])
            .expect("profile weights are finite")
            .then(a.cmp(&b))
    };
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, rank);
        idx.truncate(n);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// The caption without the tokens at `removed`, in original order.
pub fn reduce_caption(caption: &Caption, removed: &[usize]) -> Result<Caption, ExtractError> {
    let tokens = caption.tokens();
    if removed.is_empty() || removed.iter().any(|&i| i >= tokens.len()) {
        return Err(ExtractError::BadRemoval);
    }
    let kept: Vec<String> = tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, t)| t.clone())
        .collect();
    if kept.is_empty() {
        return Err(ExtractError::BadRemoval);
    }
    Ok(Caption::from_tokens(kept)?)
}

/// `p(s) / max(Σ_{s' ≠ s} p(s'), 1e-12)` over every label of `probs`.
pub fn confidence_score<T: Scalar>(
    probs: &LabelDistribution<T>,
    style: &StyleLabel,
) -> Result<T, ExtractError> {
    confidence_excluding(probs, style, None)
}

/// Like [`confidence_score`], leaving `excluded` out of the competing labels.
pub fn confidence_excluding<T: Scalar>(
    probs: &LabelDistribution<T>,
    style: &StyleLabel,
    excluded: Option<&StyleLabel>,
) -> Result<T, ExtractError> {
    let target = probs
        .prob(style)
        .ok_or_else(|| ExtractError::UnknownLabel(style.to_string()))?;
    let rest: T = probs
        .iter()
        .filter(|(l, _)| *l != style && Some(*l) != excluded)
        .map(|(_, p)| p)
        .sum();
    let floor = T::from_f64_lossy(CONFIDENCE_FLOOR);
    Ok(target / rest.max(floor))
}

fn backend_err(sample: &StylizedSample) -> impl FnOnce(BackendError) -> ExtractError + '_ {
    move |source| ExtractError::Backend {
        sample_id: sample.image.id.clone(),
        source,
    }
}

fn checked_profile<T: Scalar>(
    sample: &StylizedSample,
    classifier: &dyn ClassifierBackend<T>,
) -> Result<AttentionProfile<T>, ExtractError> {
    let profile = classifier
        .attention(sample.caption.tokens())
        .map_err(backend_err(sample))?;
    let caps = classifier.capabilities();
    if profile.token_count() != sample.caption.len()
        || profile.head_count() != caps.head_count
        || profile.layer_count() != caps.layer_count
    {
        return Err(backend_err(sample)(BackendError::InvalidOutput(format!(
            "profile is {}x{}x{}, expected {}x{}x{}",
            profile.head_count(),
            profile.layer_count(),
            profile.token_count(),
            caps.head_count,
            caps.layer_count,
            sample.caption.len()
        ))));
    }
    Ok(profile)
}

/// Head/layer candidates in report order: layer-major, then head.
fn candidates(head_count: usize, layer_count: usize) -> Vec<HeadLayerId> {
    (0..layer_count)
        .flat_map(|layer| (0..head_count).map(move |head| HeadLayerId { head, layer }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayerSelection<T> {
    pub best: HeadLayerId,
    /// One row per head/layer, ordered by layer then head.
    pub report: Vec<ConfidenceRecord<T>>,
    /// Captions that took part (at least two tokens).
    pub scored: usize,
}

/// Picks the head/layer whose top-ε deletions minimize the mean confidence
/// over `corpus`. Ties go to the smaller layer, then the smaller head.
pub fn select_head_layer<T: Scalar>(
    corpus: &[StylizedSample],
    labels: &LabelSet,
    classifier: &dyn ClassifierBackend<T>,
    cfg: &ExtractorConfig,
) -> Result<HeadLayerSelection<T>, ExtractError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ExtractError::EmptyCorpus);
    }
    let caps = classifier.capabilities();
    let grid = candidates(caps.head_count, caps.layer_count);
    let excluded = if cfg.factual_in_denominator {
        None
    } else {
        labels.factual()
    };
    let eligible: Vec<&StylizedSample> = corpus.iter().filter(|s| s.caption.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(ExtractError::NoEligibleCaption);
    }

    let per_caption: Vec<Vec<T>> = eligible
        .par_iter()
        .map(|sample| {
            let profile = checked_profile(sample, classifier)?;
            let n = phrase_len(cfg.epsilon, sample.caption.len(), cfg.min_phrase_len)?;
            // Many heads delete the same words; classify each reduction once.
            let mut seen: HashMap<Vec<usize>, T> = HashMap::new();
            grid.iter()
                .map(|&hl| {
                    let removed = top_tokens(&profile, hl, n)?;
                    if let Some(&c) = seen.get(&removed) {
                        return Ok(c);
                    }
                    let reduced = reduce_caption(&sample.caption, &removed)?;
                    let probs = classifier
                        .classify(reduced.tokens())
                        .map_err(backend_err(sample))?;
                    let c = confidence_excluding(&probs, &sample.style, excluded)?;
                    seen.insert(removed, c);
                    Ok(c)
                })
                .collect::<Result<Vec<T>, ExtractError>>()
        })
        .collect::<Result<_, _>>()?;

    let count = T::from_usize(eligible.len()).expect("corpus size fits the scalar");
    let report: Vec<ConfidenceRecord<T>> = grid
        .iter()
        .enumerate()
        .map(|(k, &hl)| {
            let total = per_caption.iter().fold(T::zero(), |acc, row| acc + row[k]);
            ConfidenceRecord {
                head_layer: hl,
                mean_confidence: total / count,
            }
        })
        .collect();
    let mut best = &report[0];
    for r in &report[1..] {
        if r.mean_confidence < best.mean_confidence {
            best = r;
        }
    }
    debug!(
        "selected head {} layer {} (mean confidence {})",
        best.head_layer.head, best.head_layer.layer, best.mean_confidence
    );
    Ok(HeadLayerSelection {
        best: best.head_layer,
        report,
        scored: eligible.len(),
    })
}

/// Splits a caption into its top-ε words at `hl` and the rest.
pub fn extract_phrase<T: Scalar>(
    sample: &StylizedSample,
    hl: HeadLayerId,
    classifier: &dyn ClassifierBackend<T>,
    cfg: &ExtractorConfig,
) -> Result<AnnotatedStylizedSample, ExtractError> {
    let n = phrase_len(cfg.epsilon, sample.caption.len(), cfg.min_phrase_len)?;
    let profile = checked_profile(sample, classifier)?;
    let picked = top_tokens(&profile, hl, n)?;
    Ok(split_by_indices(sample, &picked)?)
}

pub(crate) fn split_by_indices(
    sample: &StylizedSample,
    picked: &[usize],
) -> Result<AnnotatedStylizedSample, DataError> {
    let (mut phrase, mut residual) = (Vec::new(), Vec::new());
    for (i, t) in sample.caption.tokens().iter().enumerate() {
        if picked.contains(&i) {
            phrase.push(t.clone());
        } else {
            residual.push(t.clone());
        }
    }
    AnnotatedStylizedSample::new(sample.clone(), phrase, residual)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFailure {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation<T> {
    pub head_layer: HeadLayerId,
    pub report: Vec<ConfidenceRecord<T>>,
    pub annotated: Vec<AnnotatedStylizedSample>,
    pub skipped: Vec<SampleFailure>,
}

impl<T> Annotation<T> {
    pub fn contiguous_phrases(&self) -> usize {
        self.annotated.iter().filter(|a| a.phrase_is_contiguous()).count()
    }
}

/// Selects the head/layer over the whole corpus, then extracts every
/// caption's style phrase. Samples that fail extraction are skipped and
/// listed, not fatal.
pub fn annotate_corpus<T: Scalar>(
    corpus: &[StylizedSample],
    labels: &LabelSet,
    classifier: &dyn ClassifierBackend<T>,
    cfg: &ExtractorConfig,
) -> Result<Annotation<T>, ExtractError> {
    if corpus.is_empty() {
        return Err(ExtractError::EmptyCorpus);
    }
    let selection = select_head_layer(corpus, labels, classifier, cfg)?;
    let results: Vec<Result<AnnotatedStylizedSample, ExtractError>> = corpus
        .par_iter()
        .map(|s| extract_phrase(s, selection.best, classifier, cfg))
        .collect();
    let mut annotated = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for (sample, result) in corpus.iter().zip(results) {
        match result {
            Ok(a) => annotated.push(a),
            Err(e) => {
                warn!("skipping sample {}: {e}", sample.image.id);
                skipped.push(SampleFailure {
                    sample_id: sample.image.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(Annotation {
        head_layer: selection.best,
        report: selection.report,
        annotated,
        skipped,
    })
}
