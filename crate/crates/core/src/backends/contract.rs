//! Checks any backend must pass before the pipeline relies on it.
//!
//! The checks are behavioural and backend-agnostic, so the same suite runs
//! against the reference backends in process and against adapters over the
//! wire.

use super::{ClassifierBackend, EmbedderBackend, GeneratorBackend};
use crate::data::ImageRef;
use crate::distribution::MASS_TOLERANCE;
use crate::generator::assemble_prompt;
use crate::num::{l2_norm, Scalar};
use crate::retriever::UNIT_TOLERANCE;

/// Collected contract violations; empty means the backend passed.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ContractReport {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations.push(what());
        }
    }
}

/// Distribution and attention normalization, declared shape, stable labels
/// and repeatability over `probes`.
pub fn check_classifier<T: Scalar>(
    backend: &dyn ClassifierBackend<T>,
    probes: &[Vec<String>],
) -> ContractReport {
    let mut r = ContractReport::default();
    let caps = backend.capabilities().clone();
    for tokens in probes {
        let text = tokens.join(" ");
        match backend.classify(tokens) {
            Ok(d) => {
                let mass: f64 = d.iter().map(|(_, p)| p.to_f64_lossy()).sum();
                r.check((mass - 1.0).abs() <= MASS_TOLERANCE, || format!("classify({text}): mass {mass}"));
                let labels: Vec<_> = d.labels().cloned().collect();
                r.check(labels == caps.labels, || format!("classify({text}): labels {labels:?}"));
                let again = backend.classify(tokens).ok();
                r.check(again.as_ref() == Some(&d), || format!("classify({text}) is not repeatable"));
            }
            Err(e) => r.check(false, || format!("classify({text}) failed: {e}")),
        }
        match backend.attention(tokens) {
            Ok(p) => {
                let shape = (p.head_count(), p.layer_count(), p.token_count());
                let want = (caps.head_count, caps.layer_count, tokens.len());
                r.check(shape == want, || format!("attention({text}): shape {shape:?}, expected {want:?}"));
                for head in p.to_nested() {
                    for row in head {
                        let sum: f64 = row.iter().map(|w| w.to_f64_lossy()).sum();
                        r.check((sum - 1.0).abs() <= MASS_TOLERANCE, || format!("attention({text}): row sums to {sum}"));
                    }
                }
                let again = backend.attention(tokens).ok();
                r.check(again.as_ref() == Some(&p), || format!("attention({text}) is not repeatable"));
            }
            Err(e) => r.check(false, || format!("attention({text}) failed: {e}")),
        }
    }
    r
}

/// Declared dimension on every output, unit norm, repeatability.
pub fn check_embedder<T: Scalar>(
    backend: &dyn EmbedderBackend<T>,
    probes: &[Vec<String>],
    images: &[ImageRef],
) -> ContractReport {
    let mut r = ContractReport::default();
    let d = backend.capabilities().dimension;
    let inspect = |r: &mut ContractReport, what: String, first: Result<_, _>, second: Result<_, _>| match first {
        Ok(v) => {
            let v: crate::retriever::EmbeddingVector<T> = v;
            r.check(v.dimension() == d, || format!("{what}: dimension {} != {d}", v.dimension()));
            let n = l2_norm(v.values()).to_f64_lossy();
            r.check((n - 1.0).abs() <= UNIT_TOLERANCE, || format!("{what}: norm {n}"));
            r.check(second.ok().as_ref() == Some(&v), || format!("{what} is not repeatable"));
        }
        Err(e) => r.check(false, || format!("{what} failed: {e}")),
    };
    for tokens in probes {
        let what = format!("embed_text({})", tokens.join(" "));
        inspect(&mut r, what, backend.embed_text(tokens), backend.embed_text(tokens));
    }
    for image in images {
        let what = format!("embed_image({})", image.id);
        inspect(&mut r, what, backend.embed_image(image), backend.embed_image(image));
    }
    r
}

/// Non-empty whitespace-free tokens; identical output for identical
/// `(prompt, seed)` when the backend declares itself deterministic.
pub fn check_generator(backend: &dyn GeneratorBackend, prompts: &[(Vec<String>, Vec<String>)]) -> ContractReport {
    let mut r = ContractReport::default();
    let deterministic = backend.capabilities().deterministic;
    for (phrase, content) in prompts {
        let prompt = match assemble_prompt(phrase, content) {
            Ok(p) => p,
            Err(e) => {
                r.check(false, || format!("probe prompt invalid: {e}"));
                continue;
            }
        };
        let what = prompt.rendered().to_string();
        match backend.generate(&prompt, 7) {
            Ok(tokens) => {
                let clean = !tokens.is_empty() && tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace));
                r.check(clean, || format!("generate({what}): malformed tokens {tokens:?}"));
                if deterministic {
                    let again = backend.generate(&prompt, 7).ok();
                    r.check(again.as_ref() == Some(&tokens), || format!("generate({what}) is not repeatable"));
                }
            }
            Err(e) => r.check(false, || format!("generate({what}) failed: {e}")),
        }
    }
    r
}
