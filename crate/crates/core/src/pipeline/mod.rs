//! End-to-end augmentation: extract, index, retrieve, generate, filter.
//!
//! The first three stages are cheap and deterministic, so they are simply
//! recomputed on every run. Generation and filtering walk the factual corpus
//! in chunks; after each chunk the outputs are flushed and a checkpoint
//! records the next input offset together with the committed length of each
//! output file. A resumed run truncates the outputs back to those lengths
//! and continues, so an interrupted run produces the same files as an
//! uninterrupted one.

mod checkpoint;
mod config;
mod stats;

pub use checkpoint::{Checkpoint, Outputs};
pub use config::{BackendConfig, Paths, PipelineConfig, RetrieveConfig};
pub use stats::{stats, CorpusStats, Histogram};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    connect_classifier, connect_embedder, connect_generator, BackendError, ConnectOptions, Descriptor,
};
use crate::data::{
    load_corpus, save_corpus, write_corpus, CorpusError, FactualPair, RetrievalMode, StylizedSample,
    Tokenizer, ValidationContext,
};
use crate::extractor::{annotate_corpus, ExtractError, HeadLayerId};
use crate::filter::{filter_batch, FilterError, FilterSummary, RejectReason, StyleModels};
use crate::generator::{generate_candidates, make_finetune_pairs, GenerateError, GenerationSettings};
use crate::lm::LmError;
use crate::retriever::{build_index, RetrievalError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("extract: {0}")]
    Extract(#[from] ExtractError),
    #[error("retrieve: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("generate: {0}")]
    Generate(#[from] GenerateError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("language model: {0}")]
    Lm(#[from] LmError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("backend unavailable at input offset {offset}; rerun to resume: {message}")]
    Interrupted { offset: usize, message: String },
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Corpus(_) => "corpus",
            Self::Extract(_) => "extract",
            Self::Retrieval(_) => "retrieve",
            Self::Generate(_) => "generate",
            Self::Filter(_) => "filter",
            Self::Lm(_) => "lm",
            Self::Backend(_) => "backend",
            Self::Checkpoint(_) => "checkpoint",
            Self::Interrupted { .. } => "interrupted",
        }
    }
}

/// Cumulative counts of the chunked stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    /// Factual pairs whose chunk has been committed.
    pub processed: usize,
    pub retrieved: BTreeMap<RetrievalMode, usize>,
    pub without_neighbors: usize,
    pub generation_failures: usize,
    pub filter: FilterSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stylized: usize,
    pub annotated: usize,
    pub skipped: usize,
    pub contiguous_phrases: usize,
    pub factual: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub augmented: PathBuf,
    pub augmented_sha256: String,
    pub rejections: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// False when the run was halted before the last chunk.
    pub complete: bool,
    pub resumed_from: Option<usize>,
    pub head_layer: HeadLayerId,
    pub stages: StageCounts,
    pub counts: RunCounts,
    pub timings_ms: BTreeMap<String, u64>,
    pub config: PipelineConfig,
    pub outputs: OutputDigest,
}

/// What the observer sees after each committed chunk.
#[derive(Clone, Debug)]
pub struct Progress {
    pub chunks_done: usize,
    pub next_offset: usize,
    pub total: usize,
    pub counts: RunCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// Stop after this chunk, leaving a checkpoint to resume from.
    Halt,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Continue from a matching checkpoint instead of starting over.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: true }
    }
}

pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const REJECTIONS_FILE: &str = "rejections.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const CONFIDENCE_FILE: &str = "confidence.jsonl";
pub const FINETUNE_FILE: &str = "finetune.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const LM_DIR: &str = "lm";

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Identity of a run for resumption: the configuration minus the knobs that
/// cannot change the output, plus the input file contents.
fn run_hash(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let mut canonical = cfg.clone();
    canonical.workers = 1;
    canonical.chunk_size = 1;
    canonical.backends.timeout_secs = 0;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&canonical).expect("config serializes"));
    for p in [&cfg.paths.stylized, &cfg.paths.factual] {
        h.update(fs::read(p).map_err(|e| PipelineError::io(p, e))?);
    }
    Ok(hex(&h.finalize()))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Runs the whole pipeline. `observer` is called after each committed chunk.
pub fn augment(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    observer: &mut (dyn FnMut(&Progress) -> Control + Send),
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run(cfg, opts, observer))
}

fn run(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    observer: &mut (dyn FnMut(&Progress) -> Control + Send),
) -> Result<RunReport, PipelineError> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u64>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis() as u64);
        clock = Instant::now();
    };

    let labels = cfg.label_set()?;
    let ctx = ValidationContext::new(Tokenizer::default(), Some(labels.clone()));
    let stylized: Vec<StylizedSample> = load_corpus(&cfg.paths.stylized, &ctx)?;
    if stylized.is_empty() {
        return Err(ExtractError::EmptyCorpus.into());
    }
    let factual: Vec<FactualPair> = load_corpus(&cfg.paths.factual, &ctx)?;
    let out_dir = &cfg.paths.output_dir;
    fs::create_dir_all(out_dir.join(LM_DIR)).map_err(|e| PipelineError::io(out_dir, e))?;

    let connect = ConnectOptions {
        base_dir: PathBuf::from("."),
        timeout: Duration::from_secs(cfg.backends.timeout_secs),
        workers: cfg.workers,
        labels: Some(labels.clone()),
        dimension: cfg.retrieve.dimension,
    };
    let parse = |d: &str| d.parse::<Descriptor>();
    let classifier = connect_classifier::<f64>(&parse(&cfg.backends.classifier)?, &connect)?;
    let embedder = connect_embedder::<f64>(&parse(&cfg.backends.embedder)?, &connect)?;
    let generator = connect_generator(&parse(&cfg.backends.generator)?, &connect)?;
    lap("load", &mut timings);

    let annotation = annotate_corpus(&stylized, &labels, classifier.as_ref(), &cfg.extract)?;
    save_corpus(&annotation.annotated, out_dir.join(ANNOTATED_FILE))?;
    fs::write(out_dir.join(CONFIDENCE_FILE), jsonl(&annotation.report))
        .map_err(|e| PipelineError::io(out_dir.join(CONFIDENCE_FILE), e))?;
    info!(
        "annotated {} of {} captions at head {} layer {}",
        annotation.annotated.len(),
        stylized.len(),
        annotation.head_layer.head,
        annotation.head_layer.layer
    );
    lap("extract", &mut timings);

    let index = build_index(&annotation.annotated, embedder.as_ref())?;
    index.save(out_dir.join(INDEX_FILE))?;
    lap("index", &mut timings);

    let models = StyleModels::train(&stylized, cfg.lm)?;
    for (style, m) in models.iter() {
        m.save(out_dir.join(LM_DIR).join(format!("{style}.json")))?;
    }
    let pairs = make_finetune_pairs(&annotation.annotated);
    fs::write(out_dir.join(FINETUNE_FILE), jsonl(pairs.iter().map(|p| p.to_wire())))
        .map_err(|e| PipelineError::io(out_dir.join(FINETUNE_FILE), e))?;
    if cfg.backends.finetune {
        generator.finetune(&pairs)?;
    }
    lap("prepare", &mut timings);

    let cp_path = cfg.checkpoint_path();
    let hash = run_hash(cfg)?;
    let mut checkpoint = match Checkpoint::load(&cp_path)? {
        Some(cp) if opts.resume && cp.config_hash == hash => cp,
        Some(_) if opts.resume => {
            info!("checkpoint belongs to a different run; starting over");
            Checkpoint::new(hash)
        }
        _ => Checkpoint::new(hash),
    };
    let resumed_from = (checkpoint.next_offset > 0).then_some(checkpoint.next_offset);
    let augmented_path = out_dir.join(AUGMENTED_FILE);
    let rejections_path = out_dir.join(REJECTIONS_FILE);
    let mut outputs = Outputs::open(
        &[
            ("augmented", augmented_path.clone()),
            ("rejections", rejections_path.clone()),
            ("events", out_dir.join(EVENTS_FILE)),
        ],
        &checkpoint.outputs,
    )?;
    checkpoint.outputs = outputs.commit()?;
    checkpoint.save(&cp_path)?;

    let settings = GenerationSettings {
        modes: cfg.retrieve.modes.clone(),
        threshold: cfg.retrieve.threshold,
        seed: derive_seed(cfg.seed, &["generate"]),
    };
    let mut chunks_done = 0;
    let mut complete = true;
    while checkpoint.next_offset < factual.len() {
        let start = checkpoint.next_offset;
        let end = (start + cfg.chunk_size).min(factual.len());
        let chunk = &factual[start..end];
        let generated = generate_candidates(chunk, &index, embedder.as_ref(), generator.as_ref(), &settings)
            .map_err(|e| match e {
                GenerateError::Unavailable { .. } => PipelineError::Interrupted {
                    offset: start,
                    message: e.to_string(),
                },
                other => other.into(),
            })?;
        let filtered = filter_batch(&generated.candidates, classifier.as_ref(), &models, &cfg.filter)?;
        if filtered.any_fatal() {
            let first = filtered.unevaluated.iter().find(|u| u.fatal).expect("fatal entry");
            return Err(PipelineError::Interrupted {
                offset: start,
                message: first.error.clone(),
            });
        }

        let mut accepted = Vec::new();
        write_corpus(&filtered.accepted, &mut accepted).expect("in-memory write");
        outputs.append("augmented", &accepted)?;
        outputs.append("rejections", &jsonl(filtered.log_records()))?;
        outputs.append("events", &jsonl(&generated.events))?;

        let counts = &mut checkpoint.counts;
        counts.processed += chunk.len();
        for (mode, n) in RetrievalMode::ALL.iter().zip(generated.retrieved) {
            *counts.retrieved.entry(*mode).or_default() += n;
        }
        for e in &generated.events {
            match e {
                crate::generator::GenerationEvent::NoNeighbors { .. } => counts.without_neighbors += 1,
                crate::generator::GenerationEvent::Failed { .. } => counts.generation_failures += 1,
            }
        }
        counts.filter.merge(&filtered.summary());
        checkpoint.next_offset = end;
        checkpoint.outputs = outputs.commit()?;
        checkpoint.save(&cp_path)?;
        chunks_done += 1;

        let progress = Progress {
            chunks_done,
            next_offset: end,
            total: factual.len(),
            counts: checkpoint.counts.clone(),
        };
        if observer(&progress) == Control::Halt && end < factual.len() {
            complete = false;
            break;
        }
    }
    lap("generate_filter", &mut timings);

    let report = RunReport {
        complete,
        resumed_from,
        head_layer: annotation.head_layer,
        stages: StageCounts {
            stylized: stylized.len(),
            annotated: annotation.annotated.len(),
            skipped: annotation.skipped.len(),
            contiguous_phrases: annotation.contiguous_phrases(),
            factual: factual.len(),
        },
        counts: checkpoint.counts.clone(),
        timings_ms: timings,
        config: cfg.clone(),
        outputs: OutputDigest {
            augmented_sha256: sha256_file(&augmented_path)?,
            augmented: augmented_path,
            rejections: rejections_path,
        },
    };
    let report_path = out_dir.join(REPORT_FILE);
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(|e| PipelineError::io(&report_path, e))?;
    Ok(report)
}

impl RunCounts {
    /// Rejections attributed to `reason`.
    pub fn rejected_for(&self, reason: RejectReason) -> usize {
        self.filter.rejected_by_reason.get(&reason).copied().unwrap_or(0)
    }
}
