//! Interpolated trigram language model.
//!
//! `p(w | u v) = λ3·c(u v w)/c(u v ·) + λ2·c(v w)/c(v ·) + λ1·(c(w) + 1)/(N + V)`
//!
//! Sentences are padded with two `<s>` and one `</s>`. Every word and the
//! final `</s>` is scored; the `<s>` pads are context only. `N` counts scored
//! training tokens and `V` is the vocabulary without `<s>` (including
//! `<unk>`), so the add-one unigram is a proper distribution and keeps the
//! mixture positive whenever `λ1 > 0`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const MODEL_FORMAT: &str = "stylegraft-trigram";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("no non-empty training sentence")]
    EmptyCorpus,
    #[error("nothing to score")]
    EmptyInput,
    #[error("interpolation weights {0:?} must be non-negative and sum to 1")]
    BadLambda([f64; 3]),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    /// `(λ3, λ2, λ1)`: trigram, bigram and unigram weights.
    pub lambda: [f64; 3],
    /// Training tokens seen fewer times than this become `<unk>`.
    pub unk_threshold: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda: [0.6, 0.3, 0.1],
            unk_threshold: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let l = self.lambda;
        let ok = l.iter().all(|x| x.is_finite() && *x >= 0.0) && (l.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(LmError::BadLambda(l))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrigramModel {
    config: LmConfig,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    unigrams: Vec<u64>,
    bigrams: BTreeMap<(u32, u32), u64>,
    trigrams: BTreeMap<(u32, u32, u32), u64>,
    // Derived from the tables above.
    scored_total: u64,
    bigram_context: HashMap<u32, u64>,
    trigram_context: HashMap<(u32, u32), u64>,
}

impl TrigramModel {
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>], config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        if !sentences.iter().any(|s| !s.is_empty()) {
            return Err(LmError::EmptyCorpus);
        }
        let mut raw_counts: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in s {
                *raw_counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let reserved = [BOS, EOS, UNK];
        let keep = |t: &str| !reserved.contains(&t) && raw_counts[t] >= config.unk_threshold;

        let mut vocab: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        vocab.extend(raw_counts.keys().filter(|t| keep(t)).map(|t| t.to_string()));
        vocab.sort();
        let ids: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let (bos, eos, unk) = (ids[BOS], ids[EOS], ids[UNK]);

        let mut unigrams = vec![0u64; vocab.len()];
        let mut bigrams = BTreeMap::new();
        let mut trigrams = BTreeMap::new();
        for s in sentences.iter().filter(|s| !s.is_empty()) {
            let (mut u, mut v) = (bos, bos);
            let words = s.iter().map(|t| {
                let t = t.as_ref();
                if keep(t) {
                    ids[t]
                } else {
                    unk
                }
            });
            for w in words.chain(std::iter::once(eos)) {
                unigrams[w as usize] += 1;
                *bigrams.entry((v, w)).or_insert(0) += 1;
                *trigrams.entry((u, v, w)).or_insert(0) += 1;
                u = v;
                v = w;
            }
        }
        Ok(Self::assemble(config, vocab, ids, unigrams, bigrams, trigrams))
    }

    fn assemble(
        config: LmConfig,
        vocab: Vec<String>,
        ids: HashMap<String, u32>,
        unigrams: Vec<u64>,
        bigrams: BTreeMap<(u32, u32), u64>,
        trigrams: BTreeMap<(u32, u32, u32), u64>,
    ) -> Self {
        let mut bigram_context = HashMap::new();
        for (&(v, _), &c) in &bigrams {
            *bigram_context.entry(v).or_insert(0) += c;
        }
        let mut trigram_context = HashMap::new();
        for (&(u, v, _), &c) in &trigrams {
            *trigram_context.entry((u, v)).or_insert(0) += c;
        }
        Self {
            config,
            scored_total: unigrams.iter().sum(),
            vocab,
            ids,
            unigrams,
            bigrams,
            trigrams,
            bigram_context,
            trigram_context,
        }
    }

    pub fn config(&self) -> LmConfig {
        self.config
    }

    /// Same counts, different interpolation weights.
    pub fn with_lambda(&self, lambda: [f64; 3]) -> Result<Self, LmError> {
        let config = LmConfig { lambda, ..self.config };
        config.validate()?;
        Ok(Self { config, ..self.clone() })
    }

    /// Vocabulary size the unigram floor is spread over (everything but `<s>`).
    pub fn scored_vocab_size(&self) -> usize {
        self.vocab.len() - 1
    }

    fn id(&self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&id) if token != BOS => id,
            _ => self.ids[UNK],
        }
    }

    /// Count of a trigram given as token strings; unknown tokens read as `<unk>`.
    pub fn trigram_count(&self, u: &str, v: &str, w: &str) -> u64 {
        let key = (self.ids.get(u), self.ids.get(v), self.ids.get(w));
        match key {
            (Some(&a), Some(&b), Some(&c)) => self.trigrams.get(&(a, b, c)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn bigram_count(&self, v: &str, w: &str) -> u64 {
        match (self.ids.get(v), self.ids.get(w)) {
            (Some(&a), Some(&b)) => self.bigrams.get(&(a, b)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn unigram_count(&self, w: &str) -> u64 {
        self.ids.get(w).map_or(0, |&i| self.unigrams[i as usize])
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn prob<T: Scalar>(&self, u: u32, v: u32, w: u32) -> T {
        let f = |x: f64| T::from_f64_lossy(x);
        let ratio = |num: u64, den: u64| if den == 0 { T::zero() } else { f(num as f64) / f(den as f64) };
        let [l3, l2, l1] = self.config.lambda;
        let p3 = ratio(
            self.trigrams.get(&(u, v, w)).copied().unwrap_or(0),
            self.trigram_context.get(&(u, v)).copied().unwrap_or(0),
        );
        let p2 = ratio(
            self.bigrams.get(&(v, w)).copied().unwrap_or(0),
            self.bigram_context.get(&v).copied().unwrap_or(0),
        );
        let p1 = ratio(
            self.unigrams[w as usize] + 1,
            self.scored_total + self.scored_vocab_size() as u64,
        );
        f(l3) * p3 + f(l2) * p2 + f(l1) * p1
    }

    /// Natural-log probability of a sentence, `</s>` included.
    pub fn log_prob<T: Scalar, S: AsRef<str>>(&self, sentence: &[S]) -> T {
        let bos = self.ids[BOS];
        let eos = self.ids[EOS];
        let (mut u, mut v) = (bos, bos);
        let mut total = T::zero();
        let words = sentence.iter().map(|t| self.id(t.as_ref()));
        for w in words.chain(std::iter::once(eos)) {
            total = total + self.prob::<T>(u, v, w).ln();
            u = v;
            v = w;
        }
        total
    }

    /// `exp(-Σ log p / N)` with `N` the number of scored positions.
    pub fn perplexity<T: Scalar, S: AsRef<str>, V: AsRef<[S]>>(&self, sentences: &[V]) -> Result<T, LmError> {
        if sentences.is_empty() {
            return Err(LmError::EmptyInput);
        }
        let positions: usize = sentences.iter().map(|s| s.as_ref().len() + 1).sum();
        let total = sentences
            .iter()
            .fold(T::zero(), |acc, s| acc + self.log_prob::<T, S>(s.as_ref()));
        let n = T::from_usize(positions).expect("position count fits the scalar");
        Ok((-total / n).exp())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            lambda: self.config.lambda,
            unk_threshold: self.config.unk_threshold,
            vocab: self.vocab.clone(),
            unigrams: self.unigrams.clone(),
            bigrams: self.bigrams.iter().map(|(&(a, b), &c)| [a as u64, b as u64, c]).collect(),
            trigrams: self
                .trigrams
                .iter()
                .map(|(&(a, b, c), &n)| [a as u64, b as u64, c as u64, n])
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| LmError::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(LmError::Format(format!("unsupported {} v{}", file.format, file.version)));
        }
        let config = LmConfig {
            lambda: file.lambda,
            unk_threshold: file.unk_threshold,
        };
        config.validate()?;
        let n = file.vocab.len() as u64;
        if file.unigrams.len() != file.vocab.len() {
            return Err(LmError::Format("unigram table does not match vocabulary".into()));
        }
        let ids: HashMap<String, u32> =
            file.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        if ids.len() != file.vocab.len() || [BOS, EOS, UNK].iter().any(|r| !ids.contains_key(*r)) {
            return Err(LmError::Format("vocabulary lacks reserved symbols or repeats a word".into()));
        }
        let mut bigrams = BTreeMap::new();
        for [a, b, c] in file.bigrams {
            if a >= n || b >= n {
                return Err(LmError::Format("bigram id out of range".into()));
            }
            bigrams.insert((a as u32, b as u32), c);
        }
        let mut trigrams = BTreeMap::new();
        for [a, b, c, k] in file.trigrams {
            if a >= n || b >= n || c >= n {
                return Err(LmError::Format("trigram id out of range".into()));
            }
            trigrams.insert((a as u32, b as u32, c as u32), k);
        }
        Ok(Self::assemble(config, file.vocab, ids, file.unigrams, bigrams, trigrams))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        Self::from_json(fs::read_to_string(path)?.trim_end())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    lambda: [f64; 3],
    unk_threshold: u64,
    vocab: Vec<String>,
    unigrams: Vec<u64>,
    bigrams: Vec<[u64; 3]>,
    trigrams: Vec<[u64; 4]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(text: &[&str]) -> Vec<Vec<String>> {
        text.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn counts_padded_ngrams() {
        let m = TrigramModel::train(&sents(&["a b"]), LmConfig::default()).unwrap();
        assert_eq!(m.trigram_count(BOS, BOS, "a"), 1);
        assert_eq!(m.trigram_count("a", "b", EOS), 1);
        assert_eq!(m.trigram_count(BOS, "a", "b"), 1);
        assert_eq!(m.bigram_count(BOS, "a"), 1);
        assert_eq!(m.unigram_count(EOS), 1);
        assert_eq!(m.unigram_count(BOS), 0);
    }

    #[test]
    fn memorizing_model_has_unit_perplexity() {
        let train = sents(&["a man rides a bike"]);
        let m = TrigramModel::train(&train, LmConfig { lambda: [1.0, 0.0, 0.0], unk_threshold: 1 }).unwrap();
        assert_eq!(m.log_prob::<f64, _>(&train[0]), 0.0);
        assert_eq!(m.perplexity::<f64, _, _>(&train).unwrap(), 1.0);
    }

    #[test]
    fn uniform_unigram_model_has_vocab_perplexity() {
        // x: 2, </s>: 2, and r1/r2 folded into <unk>: 2 -> uniform over 3 types.
        let train = sents(&["x r1", "x r2"]);
        let m = TrigramModel::train(&train, LmConfig { lambda: [0.0, 0.0, 1.0], unk_threshold: 2 }).unwrap();
        assert_eq!(m.scored_vocab_size(), 3);
        let ppl: f64 = m.perplexity(&sents(&["x q z x", "zz"])).unwrap();
        assert!((ppl - 3.0).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn oov_sentence_is_finite() {
        let m = TrigramModel::train(&sents(&["a b c"]), LmConfig::default()).unwrap();
        let lp: f64 = m.log_prob(&["zebra", "quux"]);
        assert!(lp.is_finite() && lp < 0.0);
        let lp32: f32 = m.log_prob(&["zebra", "quux"]);
        assert!((lp32 as f64 - lp).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(TrigramModel::train(&empty, LmConfig::default()), Err(LmError::EmptyCorpus)));
        let bad = LmConfig { lambda: [0.5, 0.5, 0.5], unk_threshold: 1 };
        assert!(matches!(TrigramModel::train(&sents(&["a"]), bad), Err(LmError::BadLambda(_))));
        let m = TrigramModel::train(&sents(&["a"]), LmConfig::default()).unwrap();
        let none: Vec<Vec<String>> = vec![];
        assert!(matches!(m.perplexity::<f64, String, Vec<String>>(&none), Err(LmError::EmptyInput)));
        assert!(TrigramModel::from_json("{}").is_err());
    }

    #[test]
    fn retraining_is_deterministic_and_serialization_round_trips() {
        let data = sents(&["the cat sat", "the dog sat down", "a cat ran"]);
        let a = TrigramModel::train(&data, LmConfig::default()).unwrap();
        let b = TrigramModel::train(&data, LmConfig::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = TrigramModel::from_json(&a.to_json()).unwrap();
        let probe = sents(&["the cat sat down", "zebra"]);
        assert_eq!(
            a.perplexity::<f64, _, _>(&probe).unwrap().to_bits(),
            back.perplexity::<f64, _, _>(&probe).unwrap().to_bits()
        );
    }
}
