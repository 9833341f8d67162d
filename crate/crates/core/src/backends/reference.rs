//! Deterministic in-process backends.
//!
//! They stand in for the neural models so that every stage can be exercised
//! and tested without weights: a lexicon classifier whose attention is
//! concentrated on lexicon words at one designated head/layer, a hashed
//! bag-of-words embedder, and a template generator that grafts the style
//! phrase into the content.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendError, ClassifierBackend, ClassifierCapabilities, EmbedderBackend,
    EmbedderCapabilities, FinetuneAck, GeneratorBackend, GeneratorCapabilities, Modality,
};
use crate::data::{ImageRef, StyleLabel};
use crate::distribution::LabelDistribution;
use crate::extractor::{AttentionProfile, HeadLayerId};
use crate::generator::{EmotionPrompt, FineTunePair};
use crate::num::Scalar;
use crate::retriever::EmbeddingVector;
use crate::seed::derive_seed;

/// Attention weight of a lexicon word relative to any other word at the
/// designated head/layer.
pub const FOCUS_RATIO: f64 = 10.0;

/// Amplitude of the uniform jitter on the other heads and layers.
pub const JITTER: f64 = 0.5;

/// Per-label style vocabularies, labels in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    entries: Vec<(StyleLabel, BTreeSet<String>)>,
}

impl Lexicon {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self, BackendError> {
        if map.is_empty() {
            return Err(BackendError::Descriptor("lexicon has no labels".into()));
        }
        let mut entries: Vec<(StyleLabel, BTreeSet<String>)> = Vec::new();
        for (label, words) in map {
            let words: BTreeSet<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
            if words.is_empty() {
                return Err(BackendError::Descriptor(format!("empty lexicon for '{label}'")));
            }
            for (other, seen) in &entries {
                if let Some(w) = seen.intersection(&words).next() {
                    return Err(BackendError::Descriptor(format!(
                        "'{w}' is in both the '{other}' and '{label}' lexicons"
                    )));
                }
            }
            entries.push((StyleLabel::new(label), words));
        }
        Ok(Self { entries })
    }

    /// Reads a JSON object mapping each label to its word list.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Descriptor(format!("{}: {e}", path.display())))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Descriptor(format!("{}: {e}", path.display())))?;
        Self::new(map)
    }

    pub fn labels(&self) -> Vec<StyleLabel> {
        self.entries.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn words(&self, label: &StyleLabel) -> Option<&BTreeSet<String>> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, w)| w)
    }

    pub fn label_of(&self, token: &str) -> Option<&StyleLabel> {
        self.entries.iter().find(|(_, w)| w.contains(token)).map(|(l, _)| l)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.label_of(token).is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierShape {
    pub head_count: usize,
    pub layer_count: usize,
    /// The head/layer whose attention singles out lexicon words.
    pub focus: HeadLayerId,
    pub seed: u64,
}

impl Default for ClassifierShape {
    fn default() -> Self {
        Self {
            head_count: 4,
            layer_count: 6,
            focus: HeadLayerId::new(1, 2),
            seed: 0,
        }
    }
}

/// Add-one smoothed lexicon counts, normalized over the labels.
pub struct ReferenceClassifier {
    lexicon: Lexicon,
    shape: ClassifierShape,
    caps: ClassifierCapabilities,
}

impl ReferenceClassifier {
    pub fn new(lexicon: Lexicon, shape: ClassifierShape) -> Result<Self, BackendError> {
        if shape.head_count == 0 || shape.layer_count == 0 {
            return Err(BackendError::Descriptor("zero heads or layers".into()));
        }
        if shape.focus.head >= shape.head_count || shape.focus.layer >= shape.layer_count {
            return Err(BackendError::Descriptor(format!(
                "focus head {} layer {} outside {}x{}",
                shape.focus.head, shape.focus.layer, shape.head_count, shape.layer_count
            )));
        }
        let caps = ClassifierCapabilities {
            labels: lexicon.labels(),
            head_count: shape.head_count,
            layer_count: shape.layer_count,
        };
        Ok(Self { lexicon, shape, caps })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn shape(&self) -> ClassifierShape {
        self.shape
    }

    /// Raw attention scores before per-row normalization, `[head][layer][token]`.
    pub fn attention_scores(&self, tokens: &[String]) -> Vec<f64> {
        // The jitter stream is keyed by the caption's words, so each caption
        // gets its own reproducible pattern.
        let mut key: Vec<&str> = vec!["attention"];
        key.extend(tokens.iter().map(String::as_str));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.shape.seed, &key));
        let ClassifierShape { head_count, layer_count, focus, .. } = self.shape;
        let mut scores = Vec::with_capacity(head_count * layer_count * tokens.len());
        for head in 0..head_count {
            for layer in 0..layer_count {
                let focused = HeadLayerId::new(head, layer) == focus;
                for t in tokens {
                    let jitter: f64 = rng.gen_range(0.0..JITTER);
                    scores.push(match (focused, self.lexicon.contains(t)) {
                        (true, true) => FOCUS_RATIO,
                        (true, false) => 1.0,
                        (false, _) => 1.0 + jitter,
                    });
                }
            }
        }
        scores
    }
}

impl<T: Scalar> ClassifierBackend<T> for ReferenceClassifier {
    fn capabilities(&self) -> &ClassifierCapabilities {
        &self.caps
    }

    fn classify(&self, tokens: &[String]) -> Result<LabelDistribution<T>, BackendError> {
        let scores: Vec<T> = self
            .caps
            .labels
            .iter()
            .map(|label| {
                let words = self.lexicon.words(label).expect("label from lexicon");
                let hits = tokens.iter().filter(|t| words.contains(t.as_str())).count();
                T::from_usize(hits + 1).expect("count fits the scalar")
            })
            .collect();
        LabelDistribution::from_scores(&self.caps.labels, &scores)
            .map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }

    fn attention(&self, tokens: &[String]) -> Result<AttentionProfile<T>, BackendError> {
        if tokens.is_empty() {
            return Err(BackendError::InvalidOutput("attention over no tokens".into()));
        }
        let scores = self.attention_scores(tokens).into_iter().map(T::from_f64_lossy).collect();
        AttentionProfile::normalized(self.shape.head_count, self.shape.layer_count, tokens.len(), scores)
            .map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }
}

/// Sum of per-token pseudo-random vectors, normalized.
///
/// Each token maps to a fixed vector drawn uniformly from `[-1, 1)^d` by a
/// generator seeded with `(seed, token)`. Texts sharing words therefore land
/// close together, and texts with disjoint words are nearly orthogonal for
/// large `d`. Images are embedded from the tag list of a `tags:a,b,c` URI in
/// the same space, so text and image queries are comparable.
pub struct ReferenceEmbedder {
    seed: u64,
    caps: EmbedderCapabilities,
}

pub const TAG_SCHEME: &str = "tags:";

impl ReferenceEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, BackendError> {
        if dimension < 2 {
            return Err(BackendError::Descriptor(format!("dimension {dimension} below 2")));
        }
        Ok(Self {
            seed,
            caps: EmbedderCapabilities {
                dimension,
                modalities: vec![Modality::Text, Modality::Image],
            },
        })
    }

    pub fn dimension(&self) -> usize {
        self.caps.dimension
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["token", token]));
        for a in acc.iter_mut() {
            *a += rng.gen_range(-1.0..1.0);
        }
    }

    fn bag<T: Scalar, S: AsRef<str>>(&self, tokens: &[S]) -> Result<EmbeddingVector<T>, BackendError> {
        if tokens.is_empty() {
            return Err(BackendError::InvalidOutput("nothing to embed".into()));
        }
        let mut acc = vec![0.0f64; self.caps.dimension];
        for t in tokens {
            self.token_vector(t.as_ref(), &mut acc);
        }
        EmbeddingVector::new(acc)
            .map(|v| v.cast())
            .map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }

    /// Words an image is embedded from: its tags, or failing that the
    /// alphanumeric runs of its URI.
    pub fn image_words(image: &ImageRef) -> Vec<String> {
        let words: Vec<String> = match image.uri.strip_prefix(TAG_SCHEME) {
            Some(tags) => tags.split(',').map(|t| t.trim().to_lowercase()).filter(|t| !t.is_empty()).collect(),
            None => image
                .uri
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
                .collect(),
        };
        if words.is_empty() {
            vec![image.id.clone()]
        } else {
            words
        }
    }
}

impl<T: Scalar> EmbedderBackend<T> for ReferenceEmbedder {
    fn capabilities(&self) -> &EmbedderCapabilities {
        &self.caps
    }

    fn embed_text(&self, tokens: &[String]) -> Result<EmbeddingVector<T>, BackendError> {
        self.bag(tokens)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector<T>, BackendError> {
        self.bag(&Self::image_words(image))
    }
}

/// Grafts the style phrase into the content.
///
/// The last phrase word is its anchor (`pretty woman` modifies `woman`). If
/// the anchor occurs in the content, its first occurrence is replaced by the
/// whole phrase; otherwise the phrase is appended. Every phrase word and
/// every content word survives.
pub struct ReferenceGenerator {
    caps: GeneratorCapabilities,
}

impl Default for ReferenceGenerator {
    fn default() -> Self {
        Self {
            caps: GeneratorCapabilities {
                deterministic: true,
                seedable: false,
            },
        }
    }
}

pub fn graft(phrase: &[String], content: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(phrase.len() + content.len());
    let anchor = phrase.last().and_then(|a| content.iter().position(|t| t == a));
    match anchor {
        Some(anchor) => {
            out.extend_from_slice(&content[..anchor]);
            out.extend_from_slice(phrase);
            out.extend_from_slice(&content[anchor + 1..]);
        }
        None => {
            out.extend_from_slice(content);
            out.extend_from_slice(phrase);
        }
    }
    out
}

impl GeneratorBackend for ReferenceGenerator {
    fn capabilities(&self) -> &GeneratorCapabilities {
        &self.caps
    }

    fn generate(&self, prompt: &EmotionPrompt, _seed: u64) -> Result<Vec<String>, BackendError> {
        Ok(graft(prompt.style_phrase(), prompt.content()))
    }

    fn finetune(&self, pairs: &[FineTunePair]) -> Result<FinetuneAck, BackendError> {
        Ok(FinetuneAck { accepted: pairs.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::assemble_prompt;
    use crate::retriever::cosine_similarity;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn lexicon() -> Lexicon {
        let mut m = BTreeMap::new();
        m.insert("humor".to_string(), words("goofy clumsily silly"));
        m.insert("pos".to_string(), words("pretty happily"));
        Lexicon::new(m).unwrap()
    }

    #[test]
    fn lexicon_rejects_overlap_and_empty() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), words("x y"));
        m.insert("b".to_string(), words("y"));
        assert!(Lexicon::new(m).is_err());
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![]);
        assert!(Lexicon::new(m).is_err());
    }

    #[test]
    fn classifier_votes_for_the_lexicon_label() {
        let c = ReferenceClassifier::new(lexicon(), ClassifierShape::default()).unwrap();
        let d: LabelDistribution<f64> = c.classify(&words("a goofy dog runs clumsily")).unwrap();
        assert_eq!(d.argmax().as_str(), "humor");
        assert_eq!(d.prob(&"humor".into()), Some(0.75));
    }

    #[test]
    fn focus_row_favors_lexicon_words() {
        let c = ReferenceClassifier::new(lexicon(), ClassifierShape::default()).unwrap();
        let tokens = words("a pretty dog on the grass");
        let p: AttentionProfile<f64> = c.attention(&tokens).unwrap();
        let row = p.row(HeadLayerId::new(1, 2)).unwrap();
        assert!(row.iter().enumerate().all(|(i, &w)| i == 1 || row[1] >= FOCUS_RATIO * w - 1e-12));
        let other = p.row(HeadLayerId::new(0, 0)).unwrap();
        let (lo, hi) = other.iter().fold((f64::MAX, 0.0f64), |(a, b), &w| (a.min(w), b.max(w)));
        assert!(hi / lo < 1.0 + JITTER + 1e-9);
        let again: AttentionProfile<f64> = c.attention(&tokens).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn embedder_is_deterministic_and_bag_based() {
        let e = ReferenceEmbedder::new(64, 3).unwrap();
        let a: EmbeddingVector<f64> = e.embed_text(&words("a dog runs")).unwrap();
        let b: EmbeddingVector<f64> = e.embed_text(&words("runs dog a")).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let img: EmbeddingVector<f64> = e.embed_image(&ImageRef::new("x", "tags:a,dog,runs")).unwrap();
        assert!((cosine_similarity(&a, &img).unwrap() - 1.0).abs() < 1e-12);
        let other = ReferenceEmbedder::new(64, 4).unwrap();
        let c: EmbeddingVector<f64> = other.embed_text(&words("a dog runs")).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn image_words_fall_back_to_uri_pieces() {
        assert_eq!(ReferenceEmbedder::image_words(&ImageRef::new("i", "img/beach_01.jpg")), ["img", "beach", "01", "jpg"]);
        assert_eq!(ReferenceEmbedder::image_words(&ImageRef::new("i", "tags:")), ["i"]);
    }

    #[test]
    fn generator_appends_or_anchors() {
        let g = ReferenceGenerator::default();
        let p = assemble_prompt(&words("like a boss"), &words("a man rides a bike")).unwrap();
        assert_eq!(g.generate(&p, 0).unwrap().join(" "), "a man rides a bike like a boss");
        assert_eq!(g.generate(&p, 99).unwrap(), g.generate(&p, 0).unwrap());
        let p = assemble_prompt(&words("pretty woman"), &words("a woman walks a dog")).unwrap();
        assert_eq!(g.generate(&p, 0).unwrap().join(" "), "a pretty woman walks a dog");
    }
}
