//! Quality gate between generation and the augmented corpus.
//!
//! A candidate is accepted when the classifier's most probable label is its
//! target style, its perplexity under that style's trigram model is below
//! the ceiling, and the similarity of the scene it was retrieved from is
//! above the floor. Both bounds are strict.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ClassifierBackend};
use crate::data::{AugmentedPair, FilterScores, RetrievalMode, StyleLabel, StylizedSample};
use crate::distribution::LabelDistribution;
use crate::generator::GenerationCandidate;
use crate::lm::{LmConfig, LmError, TrigramModel};
use crate::num::Scalar;
use crate::retriever::{Neighbor, DEFAULT_THRESHOLD};

pub const DEFAULT_MAX_PERPLEXITY: f64 = 80.0;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no language model for style '{0}'")]
    MissingModel(String),
    #[error("classifier: {0}")]
    Backend(#[from] BackendError),
    #[error("bad criteria: {0}")]
    Criteria(String),
}

impl FilterError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, Self::Backend(e) if e.is_fatal())
    }
}

/// Thresholds shared by every candidate. The target style is the
/// candidate's own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityCriteria {
    pub max_perplexity: f64,
    pub min_similarity: f64,
    pub dedupe: bool,
}

impl Default for QualityCriteria {
    fn default() -> Self {
        Self {
            max_perplexity: DEFAULT_MAX_PERPLEXITY,
            min_similarity: DEFAULT_THRESHOLD,
            dedupe: true,
        }
    }
}

impl QualityCriteria {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.max_perplexity > 0.0) {
            return Err(FilterError::Criteria(format!("max_perplexity {} must be positive", self.max_perplexity)));
        }
        if !(-1.0..=1.0).contains(&self.min_similarity) {
            return Err(FilterError::Criteria(format!("min_similarity {} outside [-1, 1]", self.min_similarity)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport<T> {
    pub cls_prob: LabelDistribution<T>,
    pub cls_pass: bool,
    pub ppl: T,
    pub ppl_pass: bool,
    pub sim: f64,
    pub sim_pass: bool,
}

impl<T: Scalar> QualityReport<T> {
    pub fn passed(&self) -> bool {
        self.cls_pass && self.ppl_pass && self.sim_pass
    }

    pub fn reasons(&self) -> Vec<RejectReason> {
        let mut r = Vec::new();
        if !self.cls_pass {
            r.push(RejectReason::Style);
        }
        if !self.ppl_pass {
            r.push(RejectReason::Perplexity);
        }
        if !self.sim_pass {
            r.push(RejectReason::Similarity);
        }
        r
    }
}

/// One trigram model per style.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleModels {
    models: BTreeMap<StyleLabel, TrigramModel>,
}

impl StyleModels {
    pub fn new(models: BTreeMap<StyleLabel, TrigramModel>) -> Self {
        Self { models }
    }

    /// Trains each style's model on the captions of that style.
    pub fn train(corpus: &[StylizedSample], config: LmConfig) -> Result<Self, LmError> {
        let mut by_style: BTreeMap<StyleLabel, Vec<Vec<String>>> = BTreeMap::new();
        for s in corpus {
            by_style.entry(s.style.clone()).or_default().push(s.caption.tokens().to_vec());
        }
        let models = by_style
            .into_iter()
            .map(|(style, sents)| TrigramModel::train(&sents, config).map(|m| (style, m)))
            .collect::<Result<_, _>>()?;
        Ok(Self { models })
    }

    pub fn get(&self, style: &StyleLabel) -> Option<&TrigramModel> {
        self.models.get(style)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StyleLabel, &TrigramModel)> {
        self.models.iter()
    }

    pub fn insert(&mut self, style: StyleLabel, model: TrigramModel) {
        self.models.insert(style, model);
    }
}

/// Applies the three criteria to one candidate.
pub fn evaluate_candidate<T: Scalar>(
    c: &GenerationCandidate,
    classifier: &dyn ClassifierBackend<T>,
    models: &StyleModels,
    criteria: &QualityCriteria,
) -> Result<QualityReport<T>, FilterError> {
    let lm = models
        .get(&c.style)
        .ok_or_else(|| FilterError::MissingModel(c.style.to_string()))?;
    let cls_prob = classifier.classify(c.text.tokens())?;
    let cls_pass = cls_prob.argmax() == &c.style;
    let ppl: T = lm
        .perplexity(&[c.text.tokens()])
        .expect("a caption has at least one token");
    let ppl_pass = ppl < T::from_f64_lossy(criteria.max_perplexity);
    let sim = c.neighbor.similarity;
    Ok(QualityReport {
        cls_prob,
        cls_pass,
        ppl,
        ppl_pass,
        sim,
        sim_pass: sim > criteria.min_similarity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Style,
    Perplexity,
    Similarity,
    /// Passed, but an identical caption for the same image was kept.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection<T> {
    pub candidate: GenerationCandidate,
    pub report: QualityReport<T>,
    pub reasons: Vec<RejectReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unevaluated {
    pub candidate: GenerationCandidate,
    pub error: String,
    /// The backend connection is gone; later candidates will fail too.
    pub fatal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome<T> {
    pub accepted: Vec<AugmentedPair>,
    pub rejected: Vec<Rejection<T>>,
    pub unevaluated: Vec<Unevaluated>,
}

impl<T: Scalar> FilterOutcome<T> {
    pub fn total(&self) -> usize {
        self.accepted.len() + self.rejected.len() + self.unevaluated.len()
    }

    pub fn any_fatal(&self) -> bool {
        self.unevaluated.iter().any(|u| u.fatal)
    }

    pub fn summary(&self) -> FilterSummary {
        let mut s = FilterSummary {
            candidates: self.total(),
            accepted: self.accepted.len(),
            unevaluated: self.unevaluated.len(),
            ..Default::default()
        };
        for a in &self.accepted {
            *s.accepted_by_mode.entry(a.provenance.mode).or_default() += 1;
        }
        for r in &self.rejected {
            for reason in &r.reasons {
                *s.rejected_by_reason.entry(*reason).or_default() += 1;
            }
        }
        s.rejected = self.rejected.len();
        s
    }

    /// Rejection log lines: every rejected and every unevaluated candidate.
    pub fn log_records(&self) -> Vec<RejectionRecord> {
        let rejected = self.rejected.iter().map(|r| RejectionRecord {
            status: "rejected".into(),
            reasons: r.reasons.clone(),
            cls_label: Some(r.report.cls_prob.argmax().to_string()),
            cls_prob: r.report.cls_prob.prob(&r.candidate.style).map(Scalar::to_f64_lossy),
            ppl: Some(r.report.ppl.to_f64_lossy()).filter(|p| p.is_finite()),
            error: None,
            ..RejectionRecord::of(&r.candidate)
        });
        let unevaluated = self.unevaluated.iter().map(|u| RejectionRecord {
            status: "unevaluated".into(),
            error: Some(u.error.clone()),
            ..RejectionRecord::of(&u.candidate)
        });
        rejected.chain(unevaluated).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub unevaluated: usize,
    pub accepted_by_mode: BTreeMap<RetrievalMode, usize>,
    /// A candidate failing several criteria counts once per criterion.
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
}

impl FilterSummary {
    pub fn merge(&mut self, other: &FilterSummary) {
        self.candidates += other.candidates;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.unevaluated += other.unevaluated;
        for (k, v) in &other.accepted_by_mode {
            *self.accepted_by_mode.entry(*k).or_default() += v;
        }
        for (k, v) in &other.rejected_by_reason {
            *self.rejected_by_reason.entry(*k).or_default() += v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub status: String,
    pub image_id: String,
    pub style: String,
    pub generated_caption: String,
    pub mode: RetrievalMode,
    pub neighbor_id: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RejectionRecord {
    fn of(c: &GenerationCandidate) -> Self {
        Self {
            status: String::new(),
            image_id: c.image.id.clone(),
            style: c.style.to_string(),
            generated_caption: c.text.raw().to_string(),
            mode: c.neighbor.mode,
            neighbor_id: c.neighbor.sample_id.clone(),
            similarity: c.neighbor.similarity,
            reasons: Vec::new(),
            cls_label: None,
            cls_prob: None,
            ppl: None,
            error: None,
        }
    }
}

fn accept<T: Scalar>(c: &GenerationCandidate, report: &QualityReport<T>) -> AugmentedPair {
    AugmentedPair {
        image: c.image.clone(),
        generated_caption: c.text.clone(),
        style: c.style.clone(),
        provenance: c.provenance(),
        scores: FilterScores {
            cls_prob: report.cls_prob.prob(&c.style).expect("argmax label is present").to_f64_lossy(),
            ppl: report.ppl.to_f64_lossy(),
        },
    }
}

/// Recovers the candidate an augmented record was accepted from.
pub fn candidate_of(pair: &AugmentedPair) -> GenerationCandidate {
    GenerationCandidate {
        image: pair.image.clone(),
        source_caption: pair.provenance.source_caption.clone(),
        text: pair.generated_caption.clone(),
        style: pair.style.clone(),
        neighbor: Neighbor {
            sample_id: pair.provenance.neighbor_id.clone(),
            similarity: pair.provenance.similarity,
            mode: pair.provenance.mode,
            style: pair.style.clone(),
            style_phrase: pair.provenance.style_phrase.clone(),
        },
    }
}

/// Evaluates every candidate and partitions the batch into accepted,
/// rejected and unevaluated, each in input order.
pub fn filter_batch<T: Scalar>(
    candidates: &[GenerationCandidate],
    classifier: &dyn ClassifierBackend<T>,
    models: &StyleModels,
    criteria: &QualityCriteria,
) -> Result<FilterOutcome<T>, FilterError> {
    criteria.validate()?;
    let reports: Vec<Result<QualityReport<T>, FilterError>> = candidates
        .par_iter()
        .map(|c| evaluate_candidate(c, classifier, models, criteria))
        .collect();

    // Among passing duplicates keep the most similar, the earliest on ties.
    let mut keeper: HashMap<(&str, &str), usize> = HashMap::new();
    if criteria.dedupe {
        for (i, (c, r)) in candidates.iter().zip(&reports).enumerate() {
            if !matches!(r, Ok(r) if r.passed()) {
                continue;
            }
            let key = (c.image.id.as_str(), c.text.raw());
            match keeper.get(&key) {
                Some(&j) if candidates[j].neighbor.similarity >= c.neighbor.similarity => {}
                _ => {
                    keeper.insert(key, i);
                }
            }
        }
    }

    let mut out = FilterOutcome {
        accepted: Vec::new(),
        rejected: Vec::new(),
        unevaluated: Vec::new(),
    };
    for (i, (c, r)) in candidates.iter().zip(reports).enumerate() {
        match r {
            Err(FilterError::Criteria(msg)) => return Err(FilterError::Criteria(msg)),
            Err(e) => out.unevaluated.push(Unevaluated {
                candidate: c.clone(),
                fatal: e.is_fatal(),
                error: e.to_string(),
            }),
            Ok(report) if report.passed() => {
                let kept = !criteria.dedupe || keeper[&(c.image.id.as_str(), c.text.raw())] == i;
                if kept {
                    out.accepted.push(accept(c, &report));
                } else {
                    out.rejected.push(Rejection {
                        candidate: c.clone(),
                        report,
                        reasons: vec![RejectReason::Duplicate],
                    });
                }
            }
            Ok(report) => out.rejected.push(Rejection {
                candidate: c.clone(),
                reasons: report.reasons(),
                report,
            }),
        }
    }
    Ok(out)
}
