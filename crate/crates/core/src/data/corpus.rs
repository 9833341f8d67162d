//! Line-delimited JSON corpora.
//!
//! One record per line, fields in a fixed order, UTF-8 throughout. Captions
//! are stored raw and re-tokenized on load, so a load/save cycle reproduces
//! the file byte for byte.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AnnotatedStylizedSample, AugmentedPair, Caption, FactualPair, FilterScores, ImageRef,
    LabelSet, Provenance, RetrievalMode, StyleLabel, StylizedSample, Tokenizer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Stylized,
    Factual,
    Annotated,
    Candidate,
    Augmented,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Stylized => "stylized",
            Self::Factual => "factual",
            Self::Annotated => "annotated",
            Self::Candidate => "candidate",
            Self::Augmented => "augmented",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {} malformed {kind} record(s); first: {}", errors.len(), errors[0])]
    Invalid {
        path: PathBuf,
        kind: CorpusKind,
        errors: Vec<LineError>,
    },
}

impl CorpusError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// How records are validated on load.
#[derive(Clone, Debug, Default)]
pub struct ValidationContext {
    pub tokenizer: Tokenizer,
    /// When absent any label is accepted.
    pub labels: Option<LabelSet>,
}

impl ValidationContext {
    pub fn new(tokenizer: Tokenizer, labels: Option<LabelSet>) -> Self {
        Self { tokenizer, labels }
    }

    pub fn caption(&self, raw: String) -> Result<Caption, String> {
        Caption::parse(raw, &self.tokenizer).map_err(|e| e.to_string())
    }

    pub fn style(&self, name: String) -> Result<StyleLabel, String> {
        let label = StyleLabel::new(name);
        match &self.labels {
            Some(set) => set.check_style(&label).map(|_| label).map_err(|e| e.to_string()),
            None if label.as_str().is_empty() => Err("empty style label".into()),
            None => Ok(label),
        }
    }
}

/// A domain record with a fixed on-disk schema.
pub trait CorpusRecord: Sized {
    const KIND: CorpusKind;
    type Wire: Serialize + DeserializeOwned;

    fn from_wire(wire: Self::Wire, ctx: &ValidationContext) -> Result<Self, String>;
    fn to_wire(&self) -> Self::Wire;
    /// Identifier that must be unique within the corpus, if the kind has one.
    fn unique_id(&self) -> Option<&str>;
}

pub fn load_corpus<R: CorpusRecord>(
    path: impl AsRef<Path>,
    ctx: &ValidationContext,
) -> Result<Vec<R>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file), ctx).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        CorpusError::Invalid { kind, errors, .. } => CorpusError::Invalid {
            path: path.to_path_buf(),
            kind,
            errors,
        },
    })
}

/// Parses every line, collecting all malformed ones before failing.
pub fn read_corpus<R: CorpusRecord>(
    reader: impl Read,
    ctx: &ValidationContext,
) -> Result<Vec<R>, CorpusError> {
    let reader = BufReader::new(reader);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CorpusError::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<R::Wire>(&line)
            .map_err(|e| e.to_string())
            .and_then(|w| R::from_wire(w, ctx));
        match parsed {
            Ok(record) => {
                if let Some(id) = record.unique_id() {
                    if let Some(first) = seen.get(id) {
                        errors.push(LineError {
                            line: lineno,
                            message: format!("duplicate id '{id}' (first on line {first})"),
                        });
                        continue;
                    }
                    seen.insert(id.to_string(), lineno);
                }
                records.push(record);
            }
            Err(message) => errors.push(LineError {
                line: lineno,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(CorpusError::Invalid {
            path: PathBuf::from("<stream>"),
            kind: R::KIND,
            errors,
        })
    }
}

pub fn save_corpus<R: CorpusRecord>(records: &[R], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_corpus(records, &mut out).map_err(|e| CorpusError::io(path, e))?;
    out.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn write_corpus<R: CorpusRecord>(records: &[R], out: &mut impl Write) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, &r.to_wire())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizedWire {
    pub image_id: String,
    pub image_uri: String,
    pub caption: String,
    pub style: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactualWire {
    pub image_id: String,
    pub image_uri: String,
    pub caption: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedWire {
    pub image_id: String,
    pub image_uri: String,
    pub caption: String,
    pub style: String,
    pub style_phrase: Vec<String>,
    pub residual: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceWire {
    pub mode: RetrievalMode,
    pub neighbor_id: String,
    pub similarity: f64,
    pub style_phrase: Vec<String>,
    pub source_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
}

/// Shared schema of candidate and augmented records: the factual record, the
/// target style, the generated caption and its provenance.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedWire {
    pub image_id: String,
    pub image_uri: String,
    pub caption: String,
    pub style: String,
    pub generated_caption: String,
    pub provenance: ProvenanceWire,
}

fn image(id: String, uri: String) -> Result<ImageRef, String> {
    if id.is_empty() {
        return Err("empty image_id".into());
    }
    Ok(ImageRef::new(id, uri))
}

pub(crate) fn provenance_from_wire(
    p: &ProvenanceWire,
    source_caption: Caption,
) -> Result<Provenance, String> {
    if !p.similarity.is_finite() || p.similarity.abs() > 1.0 + 1e-6 {
        return Err(format!("similarity {} outside [-1, 1]", p.similarity));
    }
    if p.neighbor_id.is_empty() {
        return Err("empty neighbor_id".into());
    }
    if p.style_phrase.is_empty() {
        return Err("empty provenance style_phrase".into());
    }
    if p.source_caption != source_caption.raw() {
        return Err("provenance source_caption differs from caption".into());
    }
    Ok(Provenance {
        mode: p.mode,
        neighbor_id: p.neighbor_id.clone(),
        similarity: p.similarity,
        style_phrase: p.style_phrase.clone(),
        source_caption,
    })
}

pub(crate) fn provenance_to_wire(p: &Provenance, scores: Option<FilterScores>) -> ProvenanceWire {
    ProvenanceWire {
        mode: p.mode,
        neighbor_id: p.neighbor_id.clone(),
        similarity: p.similarity,
        style_phrase: p.style_phrase.clone(),
        source_caption: p.source_caption.raw().to_string(),
        cls_prob: scores.map(|s| s.cls_prob),
        ppl: scores.map(|s| s.ppl),
    }
}

impl CorpusRecord for StylizedSample {
    const KIND: CorpusKind = CorpusKind::Stylized;
    type Wire = StylizedWire;

    fn from_wire(w: StylizedWire, ctx: &ValidationContext) -> Result<Self, String> {
        Ok(Self {
            image: image(w.image_id, w.image_uri)?,
            caption: ctx.caption(w.caption)?,
            style: ctx.style(w.style)?,
        })
    }

    fn to_wire(&self) -> StylizedWire {
        StylizedWire {
            image_id: self.image.id.clone(),
            image_uri: self.image.uri.clone(),
            caption: self.caption.raw().to_string(),
            style: self.style.to_string(),
        }
    }

    fn unique_id(&self) -> Option<&str> {
        Some(&self.image.id)
    }
}

impl CorpusRecord for FactualPair {
    const KIND: CorpusKind = CorpusKind::Factual;
    type Wire = FactualWire;

    fn from_wire(w: FactualWire, ctx: &ValidationContext) -> Result<Self, String> {
        Ok(Self {
            image: image(w.image_id, w.image_uri)?,
            caption: ctx.caption(w.caption)?,
        })
    }

    fn to_wire(&self) -> FactualWire {
        FactualWire {
            image_id: self.image.id.clone(),
            image_uri: self.image.uri.clone(),
            caption: self.caption.raw().to_string(),
        }
    }

    fn unique_id(&self) -> Option<&str> {
        Some(&self.image.id)
    }
}

impl CorpusRecord for AnnotatedStylizedSample {
    const KIND: CorpusKind = CorpusKind::Annotated;
    type Wire = AnnotatedWire;

    fn from_wire(w: AnnotatedWire, ctx: &ValidationContext) -> Result<Self, String> {
        let base = StylizedSample {
            image: image(w.image_id, w.image_uri)?,
            caption: ctx.caption(w.caption)?,
            style: ctx.style(w.style)?,
        };
        AnnotatedStylizedSample::new(base, w.style_phrase, w.residual).map_err(|e| e.to_string())
    }

    fn to_wire(&self) -> AnnotatedWire {
        let base = self.base();
        AnnotatedWire {
            image_id: base.image.id.clone(),
            image_uri: base.image.uri.clone(),
            caption: base.caption.raw().to_string(),
            style: base.style.to_string(),
            style_phrase: self.style_phrase().to_vec(),
            residual: self.residual().to_vec(),
        }
    }

    fn unique_id(&self) -> Option<&str> {
        Some(self.id())
    }
}

impl CorpusRecord for AugmentedPair {
    const KIND: CorpusKind = CorpusKind::Augmented;
    type Wire = GeneratedWire;

    fn from_wire(w: GeneratedWire, ctx: &ValidationContext) -> Result<Self, String> {
        let source = ctx.caption(w.caption)?;
        let provenance = provenance_from_wire(&w.provenance, source)?;
        let (Some(cls_prob), Some(ppl)) = (w.provenance.cls_prob, w.provenance.ppl) else {
            return Err("augmented record lacks cls_prob or ppl".into());
        };
        if !(0.0..=1.0).contains(&cls_prob) || ppl.is_nan() || ppl <= 0.0 {
            return Err(format!("filter scores out of range (cls_prob {cls_prob}, ppl {ppl})"));
        }
        Ok(Self {
            image: image(w.image_id, w.image_uri)?,
            generated_caption: ctx.caption(w.generated_caption)?,
            style: ctx.style(w.style)?,
            provenance,
            scores: FilterScores { cls_prob, ppl },
        })
    }

    fn to_wire(&self) -> GeneratedWire {
        GeneratedWire {
            image_id: self.image.id.clone(),
            image_uri: self.image.uri.clone(),
            caption: self.provenance.source_caption.raw().to_string(),
            style: self.style.to_string(),
            generated_caption: self.generated_caption.raw().to_string(),
            provenance: provenance_to_wire(&self.provenance, Some(self.scores)),
        }
    }

    fn unique_id(&self) -> Option<&str> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ValidationContext {
        ValidationContext::new(
            Tokenizer::default(),
            Some(LabelSet::parse("humor,roman,pos,neg", Some("factual")).unwrap()),
        )
    }

    const STYLIZED: &str = r#"{"image_id":"s1","image_uri":"tags:dog,grass","caption":"A dog runs like a boss.","style":"humor"}
{"image_id":"s2","image_uri":"tags:cat","caption":"a pretty cat sleeps","style":"pos"}
{"image_id":"s3","image_uri":"tags:man","caption":"a man waits sadly","style":"neg"}
"#;

    #[test]
    fn reads_well_formed_stylized_file() {
        let corpus: Vec<StylizedSample> = read_corpus(STYLIZED.as_bytes(), &ctx()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus[0].caption.tokens(), ["a", "dog", "runs", "like", "a", "boss"]);
        assert_eq!(corpus[2].style, StyleLabel::new("neg"));
    }

    #[test]
    fn missing_field_names_the_line() {
        let text = "{\"image_id\":\"a\",\"image_uri\":\"u\",\"caption\":\"x y\",\"style\":\"pos\"}\n\
                    {\"image_id\":\"b\",\"image_uri\":\"u\",\"caption\":\"x y\"}\n";
        let err = read_corpus::<StylizedSample>(text.as_bytes(), &ctx()).unwrap_err();
        let CorpusError::Invalid { errors, .. } = err else {
            panic!("expected schema error")
        };
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 2);
        assert!(errors[0].message.contains("style"), "{}", errors[0].message);
    }

    #[test]
    fn duplicate_ids_and_bad_labels_are_reported() {
        let text = "{\"image_id\":\"a\",\"image_uri\":\"u\",\"caption\":\"x\",\"style\":\"pos\"}\n\
                    {\"image_id\":\"a\",\"image_uri\":\"u\",\"caption\":\"y\",\"style\":\"pos\"}\n\
                    {\"image_id\":\"c\",\"image_uri\":\"u\",\"caption\":\"z\",\"style\":\"factual\"}\n\
                    {\"image_id\":\"d\",\"image_uri\":\"u\",\"caption\":\"...\",\"style\":\"pos\"}\n";
        let CorpusError::Invalid { errors, .. } =
            read_corpus::<StylizedSample>(text.as_bytes(), &ctx()).unwrap_err()
        else {
            panic!()
        };
        let lines: Vec<usize> = errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        assert!(errors[0].message.contains("duplicate"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus::<FactualPair>("/nonexistent/corpus.jsonl", &ctx()).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let corpus: Vec<StylizedSample> = read_corpus(STYLIZED.as_bytes(), &ctx()).unwrap();
        let mut first = Vec::new();
        write_corpus(&corpus, &mut first).unwrap();
        assert_eq!(first, STYLIZED.as_bytes());
        let again: Vec<StylizedSample> = read_corpus(first.as_slice(), &ctx()).unwrap();
        assert_eq!(again, corpus);
    }

    #[test]
    fn empty_corpus_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_corpus::<FactualPair>(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(load_corpus::<FactualPair>(&path, &ctx()).unwrap().is_empty());
    }

    #[test]
    fn non_ascii_round_trip() {
        let text = "{\"image_id\":\"ü1\",\"image_uri\":\"file:///böse.jpg\",\"caption\":\"Un café très «joli» 😀\"}\n";
        let corpus: Vec<FactualPair> = read_corpus(text.as_bytes(), &ctx()).unwrap();
        assert_eq!(corpus[0].caption.tokens(), ["un", "café", "très", "joli", "😀"]);
        let mut out = Vec::new();
        write_corpus(&corpus, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn annotated_records_enforce_partition() {
        let good = r#"{"image_id":"a","image_uri":"u","caption":"a pretty cat","style":"pos","style_phrase":["pretty"],"residual":["a","cat"]}"#;
        let bad = r#"{"image_id":"b","image_uri":"u","caption":"a pretty cat","style":"pos","style_phrase":["pretty"],"residual":["cat","a"]}"#;
        let text = format!("{good}\n{bad}\n");
        let CorpusError::Invalid { errors, .. } =
            read_corpus::<AnnotatedStylizedSample>(text.as_bytes(), &ctx()).unwrap_err()
        else {
            panic!()
        };
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 2);
    }

    #[test]
    fn augmented_round_trip_and_score_checks() {
        let line = r#"{"image_id":"f1","image_uri":"tags:dog","caption":"a dog runs","style":"humor","generated_caption":"a dog runs like a boss","provenance":{"mode":"t2t","neighbor_id":"s1","similarity":0.7745966692414834,"style_phrase":["like","boss"],"source_caption":"a dog runs","cls_prob":0.5,"ppl":12.25}}"#;
        let text = format!("{line}\n{line}\n");
        let corpus: Vec<AugmentedPair> = read_corpus(text.as_bytes(), &ctx()).unwrap();
        assert_eq!(corpus.len(), 2, "augmented records may share an image");
        assert_eq!(corpus[0].provenance.mode, RetrievalMode::T2t);
        let mut out = Vec::new();
        write_corpus(&corpus, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);

        let no_scores = line.replace(r#","cls_prob":0.5,"ppl":12.25"#, "");
        assert!(read_corpus::<AugmentedPair>(no_scores.as_bytes(), &ctx()).is_err());
        let bad_sim = line.replace("0.7745966692414834", "1.5");
        assert!(read_corpus::<AugmentedPair>(bad_sim.as_bytes(), &ctx()).is_err());
    }
}
