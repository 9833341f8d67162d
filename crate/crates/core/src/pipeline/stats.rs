use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentedPair, RetrievalMode};

/// Counts over `[edges[i], edges[i+1])`; the last bin is closed. Values
/// outside the edges land in `underflow` or `overflow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2 && edges.windows(2).all(|w| w[0] < w[1]), "increasing edges");
        Self {
            counts: vec![0; edges.len() - 1],
            edges,
            underflow: 0,
            overflow: 0,
        }
    }

    /// `lo, lo + step, ..., hi` computed without accumulating error.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Self {
        Self::new((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
    }

    pub fn add(&mut self, x: f64) {
        let last = *self.edges.last().expect("edges");
        if x.is_nan() || x > last {
            self.overflow += 1;
        } else if x < self.edges[0] {
            self.underflow += 1;
        } else {
            let bin = self.edges[1..].iter().position(|&e| x < e).unwrap_or(self.counts.len() - 1);
            self.counts[bin] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub per_mode: BTreeMap<RetrievalMode, usize>,
    pub per_style: BTreeMap<String, usize>,
    pub similarity: Histogram,
    pub perplexity: Histogram,
}

/// Per-mode and per-style counts with similarity and perplexity histograms.
pub fn stats(records: &[AugmentedPair]) -> CorpusStats {
    let mut s = CorpusStats {
        total: records.len(),
        per_mode: RetrievalMode::ALL.iter().map(|&m| (m, 0)).collect(),
        per_style: BTreeMap::new(),
        similarity: Histogram::uniform(0.0, 1.0, 10),
        perplexity: Histogram::uniform(0.0, 80.0, 8),
    };
    for r in records {
        *s.per_mode.entry(r.provenance.mode).or_default() += 1;
        *s.per_style.entry(r.style.to_string()).or_default() += 1;
        // A cosine of unit vectors can round a few ulps past 1.
        s.similarity.add(r.provenance.similarity.clamp(-1.0, 1.0));
        s.perplexity.add(r.scores.ppl);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        let mut h = Histogram::uniform(0.0, 1.0, 10);
        for x in [0.0, 0.05, 0.1, 0.95, 1.0, -0.2, 1.5] {
            h.add(x);
        }
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[9], 2);
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert_eq!(h.total(), 7);
    }

    #[test]
    fn empty_corpus_gives_zeros() {
        let s = stats(&[]);
        assert_eq!(s.total, 0);
        assert_eq!(s.per_mode.len(), 4);
        assert!(s.per_mode.values().all(|&n| n == 0));
        assert_eq!(s.similarity.total() + s.perplexity.total(), 0);
    }
}
