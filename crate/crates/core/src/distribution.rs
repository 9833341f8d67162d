//! Probability distributions over style labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StyleLabel;
use crate::num::Scalar;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("distribution has no labels")]
    Empty,
    #[error("label '{0}' appears twice")]
    DuplicateLabel(String),
    #[error("probability of '{0}' is negative or not finite")]
    BadProbability(String),
    #[error("probabilities sum to {0}, expected 1")]
    BadMass(f64),
    #[error("{labels} labels but {values} values")]
    LengthMismatch { labels: usize, values: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LabelDistribution<T> {
    entries: Vec<(StyleLabel, T)>,
}

impl<T: Scalar> LabelDistribution<T> {
    pub fn new(entries: Vec<(StyleLabel, T)>) -> Result<Self, DistributionError> {
        if entries.is_empty() {
            return Err(DistributionError::Empty);
        }
        for (i, (label, p)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(l, _)| l == label) {
                return Err(DistributionError::DuplicateLabel(label.to_string()));
            }
            if !p.is_finite() || *p < T::zero() {
                return Err(DistributionError::BadProbability(label.to_string()));
            }
        }
        let mass: T = entries.iter().map(|(_, p)| *p).sum();
        let mass = mass.to_f64_lossy();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(DistributionError::BadMass(mass));
        }
        Ok(Self { entries })
    }

    /// Normalizes non-negative scores into a distribution.
    pub fn from_scores(labels: &[StyleLabel], scores: &[T]) -> Result<Self, DistributionError> {
        if labels.len() != scores.len() {
            return Err(DistributionError::LengthMismatch {
                labels: labels.len(),
                values: scores.len(),
            });
        }
        let total: T = scores.iter().copied().sum();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(DistributionError::BadMass(total.to_f64_lossy()));
        }
        Self::new(
            labels
                .iter()
                .cloned()
                .zip(scores.iter().map(|&s| s / total))
                .collect(),
        )
    }

    pub fn prob(&self, label: &StyleLabel) -> Option<T> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, p)| *p)
    }

    pub fn labels(&self) -> impl Iterator<Item = &StyleLabel> {
        self.entries.iter().map(|(l, _)| l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StyleLabel, T)> {
        self.entries.iter().map(|(l, p)| (l, *p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most probable label; the earliest listed label wins ties.
    pub fn argmax(&self) -> &StyleLabel {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        &best.0
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> LabelDistribution<U> {
        LabelDistribution {
            entries: self.entries.iter().map(|(l, p)| (l.clone(), f(*p))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> Vec<StyleLabel> {
        names.iter().map(|&n| n.into()).collect()
    }

    #[test]
    fn validates_mass_and_entries() {
        let l = labels(&["a", "b"]);
        assert!(LabelDistribution::<f64>::from_scores(&l, &[1.0, 3.0]).is_ok());
        assert!(matches!(
            LabelDistribution::new(vec![("a".into(), 0.5f64), ("b".into(), 0.4)]),
            Err(DistributionError::BadMass(_))
        ));
        assert!(matches!(
            LabelDistribution::new(vec![("a".into(), 0.5f64), ("a".into(), 0.5)]),
            Err(DistributionError::DuplicateLabel(_))
        ));
        assert!(matches!(
            LabelDistribution::new(vec![("a".into(), 1.5f64), ("b".into(), -0.5)]),
            Err(DistributionError::BadProbability(_))
        ));
        assert!(LabelDistribution::<f32>::from_scores(&l, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let d = LabelDistribution::<f64>::from_scores(&labels(&["x", "y", "z"]), &[1.0, 2.0, 2.0]).unwrap();
        assert_eq!(d.argmax().as_str(), "y");
        let u = LabelDistribution::<f32>::from_scores(&labels(&["x", "y"]), &[1.0, 1.0]).unwrap();
        assert_eq!(u.argmax().as_str(), "x");
    }
}
