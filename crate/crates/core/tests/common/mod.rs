//! Fixtures and independent oracles shared by the integration tests.
//!
//! Every oracle here is written from the definitions, not from the library
//! code, and favours obviousness over speed.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::Rng;
use stylegraft::backends::reference::{ClassifierShape, Lexicon, ReferenceClassifier};
use stylegraft::backends::ClassifierBackend;
use stylegraft::data::{Caption, FactualPair, ImageRef, LabelSet, RetrievalMode, StyleLabel, StylizedSample, Tokenizer};
use stylegraft::extractor::HeadLayerId;
use stylegraft::filter::{QualityCriteria, StyleModels};
use stylegraft::generator::GenerationCandidate;
use stylegraft::retriever::{IndexEntry, Neighbor};

pub const STYLES: [&str; 4] = ["humor", "negative", "positive", "romantic"];

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn labels() -> LabelSet {
    LabelSet::new(STYLES.iter().map(|&s| StyleLabel::new(s)).collect(), None).unwrap()
}

pub fn caption(text: &str) -> Caption {
    Caption::parse(text, &Tokenizer::default()).unwrap()
}

pub fn stylized(id: &str, text: &str, style: &str) -> StylizedSample {
    StylizedSample::new(ImageRef::new(id, format!("tags:{id}")), caption(text), style.into(), &labels()).unwrap()
}

pub fn factual(id: &str, uri: &str, text: &str) -> FactualPair {
    FactualPair {
        image: ImageRef::new(id, uri),
        caption: caption(text),
    }
}

pub fn candidate(id: &str, text: &str, style: &str, similarity: f64, neighbor: &str) -> GenerationCandidate {
    GenerationCandidate {
        image: ImageRef::new(id, format!("tags:{id}")),
        source_caption: caption("a dog runs on the beach"),
        text: caption(text),
        style: style.into(),
        neighbor: Neighbor {
            sample_id: neighbor.into(),
            similarity,
            mode: RetrievalMode::ALL[neighbor.len() % 4],
            style: style.into(),
            style_phrase: vec!["x".into()],
        },
    }
}

pub fn lexicon() -> Lexicon {
    Lexicon::load(fixtures().join("lexicon.json")).unwrap()
}

pub fn reference_classifier(focus: HeadLayerId, seed: u64) -> ReferenceClassifier {
    let shape = ClassifierShape {
        focus,
        seed,
        ..ClassifierShape::default()
    };
    ReferenceClassifier::new(lexicon(), shape).unwrap()
}

/// `clamp(round_half_up(p/q · t), max(min, 1), t − 1)` in integer arithmetic.
pub fn phrase_len_oracle(p: u64, q: u64, t: usize, min: usize) -> usize {
    let rounded = ((2 * p * t as u64 + q) / (2 * q)) as usize;
    rounded.max(min.max(1)).min(t - 1)
}

/// Indices of the `n` heaviest weights, the smaller index first among
/// equals, returned in sentence order. Full stable sort.
pub fn top_tokens_oracle(row: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut top = idx[..n].to_vec();
    top.sort();
    top
}

/// Exhaustive scan: every entry scored with a plain loop, then fully
/// sorted by similarity (descending) and id (ascending).
pub fn brute_force_topk(entries: &[IndexEntry<f64>], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for i in 0..query.len() {
                s += query[i] * e.vector.values()[i];
            }
            (e.sample_id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Interpolated trigram probabilities computed straight from raw counts.
pub struct HandLm {
    lambda: [f64; 3],
    known: Vec<String>,
    c3: HashMap<(String, String, String), u64>,
    c2: HashMap<(String, String), u64>,
    c1: HashMap<String, u64>,
    n: u64,
}

fn pad(sentence: &[String], known: &[String]) -> Vec<String> {
    let mut out = vec!["<s>".to_string(), "<s>".to_string()];
    for t in sentence {
        out.push(if known.contains(t) { t.clone() } else { "<unk>".into() });
    }
    out.push("</s>".into());
    out
}

impl HandLm {
    pub fn train(corpus: &[Vec<String>], lambda: [f64; 3], unk_threshold: u64) -> Self {
        let mut raw: HashMap<&String, u64> = HashMap::new();
        for s in corpus {
            for t in s {
                *raw.entry(t).or_default() += 1;
            }
        }
        let reserved = ["<s>", "</s>", "<unk>"];
        let known: Vec<String> = raw
            .iter()
            .filter(|(t, &c)| c >= unk_threshold && !reserved.contains(&t.as_str()))
            .map(|(t, _)| (*t).clone())
            .collect();
        let mut lm = Self {
            lambda,
            c3: HashMap::new(),
            c2: HashMap::new(),
            c1: HashMap::new(),
            n: 0,
            known,
        };
        for s in corpus {
            let p = pad(s, &lm.known);
            for i in 2..p.len() {
                *lm.c3.entry((p[i - 2].clone(), p[i - 1].clone(), p[i].clone())).or_default() += 1;
                *lm.c2.entry((p[i - 1].clone(), p[i].clone())).or_default() += 1;
                *lm.c1.entry(p[i].clone()).or_default() += 1;
                lm.n += 1;
            }
        }
        lm
    }

    /// Known words plus `</s>` and `<unk>`.
    pub fn vocab_size(&self) -> u64 {
        self.known.len() as u64 + 2
    }

    pub fn prob(&self, u: &str, v: &str, w: &str) -> f64 {
        let ctx3: u64 = self.c3.iter().filter(|((a, b, _), _)| a == u && b == v).map(|(_, c)| c).sum();
        let ctx2: u64 = self.c2.iter().filter(|((a, _), _)| a == v).map(|(_, c)| c).sum();
        let get3 = self.c3.get(&(u.into(), v.into(), w.into())).copied().unwrap_or(0);
        let get2 = self.c2.get(&(v.into(), w.into())).copied().unwrap_or(0);
        let p3 = if ctx3 == 0 { 0.0 } else { get3 as f64 / ctx3 as f64 };
        let p2 = if ctx2 == 0 { 0.0 } else { get2 as f64 / ctx2 as f64 };
        let p1 = (self.c1.get(w).copied().unwrap_or(0) + 1) as f64 / (self.n + self.vocab_size()) as f64;
        self.lambda[0] * p3 + self.lambda[1] * p2 + self.lambda[2] * p1
    }

    pub fn perplexity(&self, sentences: &[Vec<String>]) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for s in sentences {
            let p = pad(s, &self.known);
            for i in 2..p.len() {
                total += self.prob(&p[i - 2], &p[i - 1], &p[i]).ln();
                n += 1;
            }
        }
        (-total / n as f64).exp()
    }
}

pub fn random_corpus(rng: &mut impl Rng, sentences: usize, vocab: usize, max_len: usize) -> Vec<Vec<String>> {
    (0..sentences)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
        })
        .collect()
}

/// The three quality criteria plus the dedupe rule, evaluated one
/// candidate at a time from the backends directly. Returns the indices of
/// the candidates that belong in the augmented corpus.
pub fn filter_oracle(
    candidates: &[GenerationCandidate],
    classifier: &dyn ClassifierBackend<f64>,
    models: &StyleModels,
    criteria: &QualityCriteria,
) -> Vec<usize> {
    let passing: Vec<usize> = (0..candidates.len())
        .filter(|&i| {
            let c = &candidates[i];
            let dist = classifier.classify(c.text.tokens()).unwrap();
            let mut best: Option<(&StyleLabel, f64)> = None;
            for (label, p) in dist.iter() {
                if best.map_or(true, |(_, bp)| p > bp) {
                    best = Some((label, p));
                }
            }
            let style_ok = best.unwrap().0 == &c.style;
            let ppl: f64 = models.get(&c.style).unwrap().perplexity(&[c.text.tokens().to_vec()]).unwrap();
            style_ok && ppl < criteria.max_perplexity && c.neighbor.similarity > criteria.min_similarity
        })
        .collect();
    let mut keep: BTreeMap<(String, String), usize> = BTreeMap::new();
    for &i in &passing {
        let c = &candidates[i];
        let key = (c.image.id.clone(), c.text.raw().to_string());
        let better = match keep.get(&key) {
            None => true,
            Some(&j) => candidates[j].neighbor.similarity.partial_cmp(&c.neighbor.similarity) == Some(Ordering::Less),
        };
        if better {
            keep.insert(key, i);
        }
    }
    let mut kept: Vec<usize> = keep.into_values().collect();
    kept.sort();
    kept
}
