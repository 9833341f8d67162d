use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{detokenize, DataError, LabelSet, StyleLabel, Tokenizer};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// Where a backend finds the image or its precomputed features.
    pub uri: String,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
        }
    }
}

/// A caption together with its word tokens. Tokens are never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    raw: String,
    tokens: Vec<String>,
}

impl Caption {
    pub fn parse(raw: impl Into<String>, tokenizer: &Tokenizer) -> Result<Self, DataError> {
        let raw = raw.into();
        let tokens = tokenizer.tokenize(&raw)?;
        Ok(Self { raw, tokens })
    }

    /// Builds a caption from already tokenized words; the raw text is their
    /// space-joined form.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return Err(DataError::EmptyCaption);
        }
        Ok(Self {
            raw: detokenize(&tokens),
            tokens,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined tokens.
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StylizedSample {
    pub image: ImageRef,
    pub caption: Caption,
    pub style: StyleLabel,
}

impl StylizedSample {
    pub fn new(
        image: ImageRef,
        caption: Caption,
        style: StyleLabel,
        labels: &LabelSet,
    ) -> Result<Self, DataError> {
        labels.check_style(&style)?;
        Ok(Self {
            image,
            caption,
            style,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactualPair {
    pub image: ImageRef,
    pub caption: Caption,
}

/// A stylized sample split into its style phrase and the residual content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedStylizedSample {
    base: StylizedSample,
    style_phrase: Vec<String>,
    residual: Vec<String>,
}

impl AnnotatedStylizedSample {
    /// Checks that the phrase is non-empty and that phrase and residual are an
    /// order-preserving split of the caption tokens.
    pub fn new(
        base: StylizedSample,
        style_phrase: Vec<String>,
        residual: Vec<String>,
    ) -> Result<Self, DataError> {
        if style_phrase.is_empty() {
            return Err(DataError::EmptyPhrase);
        }
        if !is_interleaving(base.caption.tokens(), &style_phrase, &residual) {
            return Err(DataError::BrokenPartition);
        }
        Ok(Self {
            base,
            style_phrase,
            residual,
        })
    }

    pub fn base(&self) -> &StylizedSample {
        &self.base
    }

    pub fn id(&self) -> &str {
        &self.base.image.id
    }

    pub fn style_phrase(&self) -> &[String] {
        &self.style_phrase
    }

    pub fn residual(&self) -> &[String] {
        &self.residual
    }

    /// Whether the phrase tokens sit next to each other in the caption.
    pub fn phrase_is_contiguous(&self) -> bool {
        let tokens = self.base.caption.tokens();
        let n = self.style_phrase.len();
        tokens.windows(n).any(|w| w == self.style_phrase.as_slice())
    }
}

/// Whether `whole` is an interleaving of `a` and `b` (each kept in order).
fn is_interleaving(whole: &[String], a: &[String], b: &[String]) -> bool {
    if whole.len() != a.len() + b.len() {
        return false;
    }
    // reachable[j]: prefix of `a` of length i and of `b` of length j can form
    // the first i + j tokens of `whole`.
    let mut reachable = vec![false; b.len() + 1];
    reachable[0] = true;
    for j in 1..=b.len() {
        reachable[j] = reachable[j - 1] && b[j - 1] == whole[j - 1];
    }
    for i in 1..=a.len() {
        reachable[0] = reachable[0] && a[i - 1] == whole[i - 1];
        for j in 1..=b.len() {
            let w = &whole[i + j - 1];
            reachable[j] = (reachable[j] && &a[i - 1] == w) || (reachable[j - 1] && &b[j - 1] == w);
        }
    }
    reachable[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    I2i,
    T2t,
    I2t,
    T2i,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 4] = [Self::I2i, Self::T2t, Self::I2t, Self::T2i];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::I2i => "i2i",
            Self::T2t => "t2t",
            Self::I2t => "i2t",
            Self::T2i => "t2i",
        }
    }

    /// The query is an image embedding.
    pub fn queries_image(self) -> bool {
        matches!(self, Self::I2i | Self::I2t)
    }

    /// The target side of the index is the image side.
    pub fn targets_images(self) -> bool {
        matches!(self, Self::I2i | Self::T2i)
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| DataError::UnknownMode(s.to_string()))
    }
}

/// Which retrieval produced a generated caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub mode: RetrievalMode,
    pub neighbor_id: String,
    pub similarity: f64,
    pub style_phrase: Vec<String>,
    pub source_caption: Caption,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterScores {
    /// Classifier probability of the target style.
    pub cls_prob: f64,
    pub ppl: f64,
}

/// A factual image paired with a generated stylized caption.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub image: ImageRef,
    pub generated_caption: Caption,
    pub style: StyleLabel,
    pub provenance: Provenance,
    pub scores: FilterScores,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sample(text: &str) -> StylizedSample {
        let labels = LabelSet::parse("pos", None).unwrap();
        StylizedSample::new(
            ImageRef::new("i", "u"),
            Caption::parse(text, &Tokenizer::default()).unwrap(),
            "pos".into(),
            &labels,
        )
        .unwrap()
    }

    #[test]
    fn annotated_sample_requires_partition() {
        let s = sample("a pretty woman smiling");
        assert!(AnnotatedStylizedSample::new(s.clone(), words("pretty"), words("a woman smiling")).is_ok());
        assert_eq!(
            AnnotatedStylizedSample::new(s.clone(), words("pretty"), words("a smiling woman")),
            Err(DataError::BrokenPartition)
        );
        assert_eq!(
            AnnotatedStylizedSample::new(s.clone(), vec![], words("a pretty woman smiling")),
            Err(DataError::EmptyPhrase)
        );
        assert_eq!(
            AnnotatedStylizedSample::new(s, words("pretty"), words("a woman")),
            Err(DataError::BrokenPartition)
        );
    }

    #[test]
    fn interleaving_handles_repeated_tokens() {
        let whole = words("a b a b");
        assert!(is_interleaving(&whole, &words("a a"), &words("b b")));
        assert!(is_interleaving(&whole, &words("b a"), &words("a b")));
        assert!(!is_interleaving(&whole, &words("b b a"), &words("a")));
    }

    #[test]
    fn contiguity_statistic() {
        let s = sample("a pretty woman smiling on her favorite street");
        let a = AnnotatedStylizedSample::new(
            s.clone(),
            words("pretty favorite"),
            words("a woman smiling on her street"),
        )
        .unwrap();
        assert!(!a.phrase_is_contiguous());
        let b = AnnotatedStylizedSample::new(s, words("pretty woman"), words("a smiling on her favorite street"))
            .unwrap();
        assert!(b.phrase_is_contiguous());
    }

    #[test]
    fn mode_sides() {
        for m in RetrievalMode::ALL {
            assert_eq!(m.as_str().parse::<RetrievalMode>().unwrap(), m);
        }
        assert!(RetrievalMode::I2i.targets_images() && RetrievalMode::T2i.targets_images());
        assert!(!RetrievalMode::T2t.targets_images() && !RetrievalMode::I2t.targets_images());
        assert!("x2y".parse::<RetrievalMode>().is_err());
    }
}
