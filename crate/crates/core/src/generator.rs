//! Prompted generation of stylized captions.
//!
//! A retrieved style phrase and a factual caption are joined into the prompt
//! `[CLS] <phrase> [SEP] <content>`. At fine-tune time the content is the
//! residual of the stylized caption the phrase came from, and the target is
//! that caption; at inference time the content is a factual caption.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbedderBackend, GeneratorBackend};
use crate::data::corpus::{provenance_from_wire, provenance_to_wire, GeneratedWire};
use crate::data::{
    detokenize, AnnotatedStylizedSample, Caption, CorpusKind, CorpusRecord, FactualPair, ImageRef,
    Provenance, RetrievalMode, StyleLabel, ValidationContext,
};
use crate::num::Scalar;
use crate::retriever::{retrieve_scene, Neighbor, RetrievalError, SceneIndex};
use crate::seed::derive_seed;

pub const CLS_MARKER: &str = "[CLS]";
pub const SEP_MARKER: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("prompt needs a non-empty style phrase and content")]
    EmptyPromptPart,
    #[error("prompt token {0:?} contains a marker or whitespace")]
    BadPromptToken(String),
    #[error("backend unavailable while processing {image_id}: {source}")]
    Unavailable {
        image_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionPrompt {
    style_phrase: Vec<String>,
    content: Vec<String>,
    rendered: String,
}

impl EmotionPrompt {
    pub fn style_phrase(&self) -> &[String] {
        &self.style_phrase
    }

    pub fn content(&self) -> &[String] {
        &self.content
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }
}

/// Renders `[CLS] <phrase> [SEP] <content>`.
pub fn assemble_prompt(
    style_phrase: &[String],
    content: &[String],
) -> Result<EmotionPrompt, GenerateError> {
    if style_phrase.is_empty() || content.is_empty() {
        return Err(GenerateError::EmptyPromptPart);
    }
    for t in style_phrase.iter().chain(content) {
        if t.is_empty() || t.contains(char::is_whitespace) || t.contains(CLS_MARKER) || t.contains(SEP_MARKER) {
            return Err(GenerateError::BadPromptToken(t.clone()));
        }
    }
    let rendered = format!(
        "{CLS_MARKER} {} {SEP_MARKER} {}",
        detokenize(style_phrase),
        detokenize(content)
    );
    Ok(EmotionPrompt {
        style_phrase: style_phrase.to_vec(),
        content: content.to_vec(),
        rendered,
    })
}

/// A prompt built from a stylized caption's own phrase and residual, and the
/// caption it should reconstruct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FineTunePair {
    pub prompt: EmotionPrompt,
    pub target: Caption,
}

#[derive(Serialize, Deserialize)]
pub struct FineTuneWire {
    pub prompt: String,
    pub target: String,
}

impl FineTunePair {
    pub fn to_wire(&self) -> FineTuneWire {
        FineTuneWire {
            prompt: self.prompt.rendered.clone(),
            target: self.target.raw().to_string(),
        }
    }
}

pub fn make_finetune_pairs(corpus: &[AnnotatedStylizedSample]) -> Vec<FineTunePair> {
    corpus
        .iter()
        .map(|a| FineTunePair {
            prompt: assemble_prompt(a.style_phrase(), a.residual())
                .expect("annotated samples have a non-empty phrase and residual"),
            target: a.base().caption.clone(),
        })
        .collect()
}

/// A generated caption for a factual image, with the retrieval behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationCandidate {
    pub image: ImageRef,
    pub source_caption: Caption,
    pub text: Caption,
    pub style: StyleLabel,
    pub neighbor: Neighbor<f64>,
}

impl GenerationCandidate {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            mode: self.neighbor.mode,
            neighbor_id: self.neighbor.sample_id.clone(),
            similarity: self.neighbor.similarity,
            style_phrase: self.neighbor.style_phrase.clone(),
            source_caption: self.source_caption.clone(),
        }
    }
}

impl CorpusRecord for GenerationCandidate {
    const KIND: CorpusKind = CorpusKind::Candidate;
    type Wire = GeneratedWire;

    fn from_wire(w: GeneratedWire, ctx: &ValidationContext) -> Result<Self, String> {
        let source_caption = ctx.caption(w.caption)?;
        let p = provenance_from_wire(&w.provenance, source_caption)?;
        let style = ctx.style(w.style)?;
        if w.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        Ok(Self {
            image: ImageRef::new(w.image_id, w.image_uri),
            text: ctx.caption(w.generated_caption)?,
            neighbor: Neighbor {
                sample_id: p.neighbor_id,
                similarity: p.similarity,
                mode: p.mode,
                style: style.clone(),
                style_phrase: p.style_phrase,
            },
            style,
            source_caption: p.source_caption,
        })
    }

    fn to_wire(&self) -> GeneratedWire {
        GeneratedWire {
            image_id: self.image.id.clone(),
            image_uri: self.image.uri.clone(),
            caption: self.source_caption.raw().to_string(),
            style: self.style.to_string(),
            generated_caption: self.text.raw().to_string(),
            provenance: provenance_to_wire(&self.provenance(), None),
        }
    }

    fn unique_id(&self) -> Option<&str> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GenerationEvent {
    NoNeighbors { image_id: String },
    Failed { image_id: String, mode: Option<RetrievalMode>, message: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationOutput {
    pub candidates: Vec<GenerationCandidate>,
    pub events: Vec<GenerationEvent>,
    /// Neighbors that cleared the threshold, per mode in [`RetrievalMode::ALL`] order.
    pub retrieved: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct GenerationSettings {
    pub modes: Vec<RetrievalMode>,
    pub threshold: f64,
    /// Stage seed; each request gets a seed derived from it, the image id and the mode.
    pub seed: u64,
}

struct PairOutcome {
    candidates: Vec<GenerationCandidate>,
    events: Vec<GenerationEvent>,
    retrieved: [usize; 4],
}

fn mode_slot(mode: RetrievalMode) -> usize {
    RetrievalMode::ALL.iter().position(|&m| m == mode).expect("listed mode")
}

/// Retrieves scenes for every factual pair and asks the generator for one
/// caption per surviving neighbor. Results keep input order. Per-item
/// failures become events; a transport failure aborts the batch.
pub fn generate_candidates<T: Scalar>(
    factual: &[FactualPair],
    index: &SceneIndex<T>,
    embedder: &dyn EmbedderBackend<T>,
    generator: &dyn GeneratorBackend,
    settings: &GenerationSettings,
) -> Result<GenerationOutput, GenerateError> {
    if settings.modes.is_empty() {
        return Err(RetrievalError::NoModes.into());
    }
    let outcomes: Vec<PairOutcome> = factual
        .par_iter()
        .map(|pair| generate_for_pair(pair, index, embedder, generator, settings))
        .collect::<Result<_, _>>()?;
    let mut out = GenerationOutput::default();
    for o in outcomes {
        out.candidates.extend(o.candidates);
        out.events.extend(o.events);
        for (total, n) in out.retrieved.iter_mut().zip(o.retrieved) {
            *total += n;
        }
    }
    debug!("{} candidates from {} factual pairs", out.candidates.len(), factual.len());
    Ok(out)
}

fn generate_for_pair<T: Scalar>(
    pair: &FactualPair,
    index: &SceneIndex<T>,
    embedder: &dyn EmbedderBackend<T>,
    generator: &dyn GeneratorBackend,
    settings: &GenerationSettings,
) -> Result<PairOutcome, GenerateError> {
    let image_id = pair.image.id.clone();
    let mut outcome = PairOutcome {
        candidates: Vec::new(),
        events: Vec::new(),
        retrieved: [0; 4],
    };
    let neighbors = match retrieve_scene(index, pair, embedder, &settings.modes, settings.threshold) {
        Ok(n) => n,
        Err(RetrievalError::Backend { source, .. }) if source.is_fatal() => {
            return Err(GenerateError::Unavailable { image_id, source })
        }
        Err(RetrievalError::Backend { source, .. }) => {
            warn!("{image_id}: retrieval failed: {source}");
            outcome.events.push(GenerationEvent::Failed {
                image_id,
                mode: None,
                message: source.to_string(),
            });
            return Ok(outcome);
        }
        Err(e) => return Err(e.into()),
    };
    if neighbors.is_empty() {
        outcome.events.push(GenerationEvent::NoNeighbors { image_id });
        return Ok(outcome);
    }
    for n in neighbors {
        outcome.retrieved[mode_slot(n.mode)] += 1;
        let prompt = assemble_prompt(&n.style_phrase, pair.caption.tokens())?;
        let seed = derive_seed(settings.seed, &[&image_id, n.mode.as_str()]);
        let generated = generator
            .generate(&prompt, seed)
            .map_err(|source| (source.is_fatal(), source))
            .and_then(|tokens| {
                Caption::from_tokens(tokens)
                    .map_err(|e| (false, BackendError::InvalidOutput(e.to_string())))
            });
        match generated {
            Ok(text) => outcome.candidates.push(GenerationCandidate {
                image: pair.image.clone(),
                source_caption: pair.caption.clone(),
                text,
                style: n.style.clone(),
                neighbor: Neighbor {
                    sample_id: n.sample_id,
                    similarity: n.similarity.to_f64_lossy(),
                    mode: n.mode,
                    style: n.style,
                    style_phrase: n.style_phrase,
                },
            }),
            Err((true, source)) => return Err(GenerateError::Unavailable { image_id, source }),
            Err((false, source)) => {
                warn!("{image_id} ({}): generation failed: {source}", n.mode);
                outcome.events.push(GenerationEvent::Failed {
                    image_id: image_id.clone(),
                    mode: Some(n.mode),
                    message: source.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn renders_the_documented_example() {
        let p = assemble_prompt(
            &words("enjoy the beauty of nature"),
            &words("kids are jumping up in the air over the snow-covered ground"),
        )
        .unwrap();
        assert_eq!(
            p.rendered(),
            "[CLS] enjoy the beauty of nature [SEP] kids are jumping up in the air over the snow-covered ground"
        );
    }

    #[test]
    fn minimal_and_invalid_prompts() {
        assert_eq!(assemble_prompt(&words("x"), &words("y")).unwrap().rendered(), "[CLS] x [SEP] y");
        assert!(matches!(assemble_prompt(&[], &words("y")), Err(GenerateError::EmptyPromptPart)));
        assert!(matches!(assemble_prompt(&words("x"), &[]), Err(GenerateError::EmptyPromptPart)));
        assert!(matches!(
            assemble_prompt(&words("[SEP]"), &words("y")),
            Err(GenerateError::BadPromptToken(_))
        ));
        assert!(matches!(
            assemble_prompt(&["a b".to_string()], &words("y")),
            Err(GenerateError::BadPromptToken(_))
        ));
    }
}
