//! Command-line front end: the full `augment` run plus one subcommand per stage.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use stylegraft::backends::{
    connect_classifier, connect_embedder, connect_generator, BackendError, ClassifierBackend, ConnectOptions,
    Descriptor, EmbedderBackend, GeneratorBackend,
};
use stylegraft::backends::wire::WireServer;
use stylegraft::data::{
    load_corpus, read_corpus, save_corpus, write_corpus, AnnotatedStylizedSample, AugmentedPair, FactualPair,
    LabelSet, RetrievalMode, StyleLabel, StylizedSample, Tokenizer, ValidationContext,
};
use stylegraft::extractor::{annotate_corpus, ExtractorConfig, DEFAULT_EPSILON};
use stylegraft::filter::{filter_batch, FilterSummary, QualityCriteria, StyleModels, DEFAULT_MAX_PERPLEXITY};
use stylegraft::generator::{generate_candidates, make_finetune_pairs, GenerationCandidate, GenerationSettings};
use stylegraft::lm::{LmConfig, TrigramModel};
use stylegraft::pipeline::{self, augment, Checkpoint, Control, Outputs, PipelineConfig, PipelineError, RunOptions};
use stylegraft::retriever::{build_index, DEFAULT_THRESHOLD};
use stylegraft::seed::derive_seed;
use stylegraft::Index;

#[derive(Parser)]
#[command(name = "stylegraft", version, about = "Stylized caption augmentation by extract, retrieve and generate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the attention head/layer and annotate style phrases.
    Extract(ExtractArgs),
    /// Embed an annotated corpus into a scene index.
    BuildIndex(BuildIndexArgs),
    /// Nearest stylized scenes for factual pairs.
    Retrieve(RetrieveArgs),
    /// Generate stylized candidates for a factual corpus.
    Generate(GenerateArgs),
    /// Write the fine-tuning pairs of an annotated corpus.
    MakeFinetune(MakeFinetuneArgs),
    /// Train a trigram model on the captions of one style.
    LmTrain(LmTrainArgs),
    /// Perplexity of captions under a trained model.
    LmPpl(LmPplArgs),
    /// Apply the quality criteria to generated candidates.
    Filter(FilterArgs),
    /// Run the whole pipeline from a configuration file.
    Augment(AugmentArgs),
    /// Summarize an augmented corpus.
    Stats(StatsArgs),
    /// Serve the reference backends over the wire protocol.
    #[command(hide = true)]
    ServeReference(ServeArgs),
}

#[derive(Args)]
struct LabelArgs {
    /// Comma separated style labels, e.g. humor,romantic.
    #[arg(long)]
    labels: String,
    #[arg(long)]
    factual_label: Option<String>,
}

impl LabelArgs {
    fn label_set(&self) -> Result<LabelSet, CliError> {
        LabelSet::parse(&self.labels, self.factual_label.as_deref()).map_err(|e| CliError::new("config", e))
    }

    fn context(&self) -> Result<ValidationContext, CliError> {
        Ok(ValidationContext::new(Tokenizer::default(), Some(self.label_set()?)))
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[command(flatten)]
    labels: LabelArgs,
    #[arg(long)]
    classifier: String,
    /// Mean confidence per head/layer, as JSONL.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    embedder: String,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    /// Factual corpus to query with.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// A single caption to query with.
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    embedder: String,
    #[arg(long, value_delimiter = ',', default_value = "i2i,t2t,i2t,t2i")]
    modes: Vec<RetrievalMode>,
    #[arg(short, long, default_value_t = 1)]
    k: usize,
    /// Drop neighbors at or below this similarity.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    embedder: String,
    #[arg(long)]
    generator: String,
    #[arg(long)]
    output: PathBuf,
    /// Generation events (pairs without neighbors, failures), as JSONL.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "i2i,t2t,i2t,t2i")]
    modes: Vec<RetrievalMode>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    chunk_size: usize,
    /// Defaults to the output path with a `.checkpoint.json` suffix.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct MakeFinetuneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct LmTrainArgs {
    /// Stylized corpus.
    #[arg(long)]
    input: PathBuf,
    /// Only train on captions of this style.
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.3,0.1")]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    unk_threshold: u64,
}

#[derive(Args)]
struct LmPplArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plain text, one caption per line.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    /// Also report the perplexity of every line.
    #[arg(long)]
    per_line: bool,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    /// Directory of `<style>.json` trigram models.
    #[arg(long)]
    lm_dir: PathBuf,
    #[arg(long)]
    classifier: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    rejections: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_PERPLEXITY)]
    max_perplexity: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    min_similarity: f64,
    #[arg(long)]
    no_dedupe: bool,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Ignore any checkpoint and start over.
    #[arg(long)]
    fresh: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Halt after this many chunks, leaving a checkpoint.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    generator: Option<String>,
    /// Accept TCP connections on this address instead of using stdio.
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Debug, Serialize)]
struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    fn new(kind: &str, e: impl std::fmt::Display) -> Self {
        Self {
            kind: kind.to_string(),
            message: e.to_string(),
        }
    }
}

macro_rules! error_kind {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e)
            }
        })*
    };
}

error_kind! {
    stylegraft::data::CorpusError => "corpus",
    stylegraft::extractor::ExtractError => "extract",
    stylegraft::retriever::RetrievalError => "retrieve",
    stylegraft::generator::GenerateError => "generate",
    stylegraft::filter::FilterError => "filter",
    stylegraft::lm::LmError => "lm",
    BackendError => "backend",
    io::Error => "io",
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::new(e.kind(), e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e }));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(a) => extract(a),
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Generate(a) => generate(a),
        Command::MakeFinetune(a) => make_finetune(a),
        Command::LmTrain(a) => lm_train(a),
        Command::LmPpl(a) => lm_ppl(a),
        Command::Filter(a) => filter(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Stats(a) => stats(a),
        Command::ServeReference(a) => serve(a),
    }
}

fn descriptor(s: &str) -> Result<Descriptor> {
    Ok(s.parse::<Descriptor>()?)
}

fn options(labels: Option<LabelSet>) -> ConnectOptions {
    ConnectOptions {
        labels,
        ..ConnectOptions::default()
    }
}

fn classifier(s: &str, labels: &LabelSet) -> Result<Box<dyn ClassifierBackend<f64>>> {
    Ok(connect_classifier(&descriptor(s)?, &options(Some(labels.clone())))?)
}

fn embedder(s: &str) -> Result<Box<dyn EmbedderBackend<f64>>> {
    Ok(connect_embedder(&descriptor(s)?, &options(None))?)
}

fn generator(s: &str) -> Result<Box<dyn GeneratorBackend>> {
    Ok(connect_generator(&descriptor(s)?, &options(None))?)
}

/// Creates the parent directory of an output path.
fn created(path: &Path) -> Result<&Path> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(path)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(created(path)?)?);
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| CliError::new("io", e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn print_json(value: &impl Serialize) {
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = writeln!(io::stdout(), "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn extract(a: ExtractArgs) -> Result<()> {
    let labels = a.labels.label_set()?;
    let corpus: Vec<StylizedSample> = load_corpus(&a.input, &a.labels.context()?)?;
    let cfg = ExtractorConfig::with_epsilon(a.epsilon)?;
    let backend = classifier(&a.classifier, &labels)?;
    let annotation = annotate_corpus(&corpus, &labels, backend.as_ref(), &cfg)?;
    save_corpus(&annotation.annotated, created(&a.output)?)?;
    if let Some(path) = &a.report {
        write_jsonl(path, &annotation.report)?;
    }
    print_json(&json!({
        "head": annotation.head_layer.head,
        "layer": annotation.head_layer.layer,
        "annotated": annotation.annotated.len(),
        "skipped": annotation.skipped.iter().map(|s| json!({"image_id": s.sample_id, "reason": s.reason})).collect::<Vec<_>>(),
        "contiguous_phrases": annotation.contiguous_phrases(),
    }));
    Ok(())
}

fn build_index_cmd(a: BuildIndexArgs) -> Result<()> {
    let corpus: Vec<AnnotatedStylizedSample> = load_corpus(&a.input, &a.labels.context()?)?;
    let index = build_index(&corpus, embedder(&a.embedder)?.as_ref())?;
    index.save(created(&a.output)?)?;
    print_json(&json!({ "entries": index.len(), "dimension": index.dimension() }));
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let index = Index::load(&a.index)?;
    let backend = embedder(&a.embedder)?;
    let mut rows = Vec::new();
    let queries: Vec<FactualPair> = match (&a.input, &a.text) {
        (Some(path), None) => load_corpus(path, &ValidationContext::new(Tokenizer::default(), None))?,
        (None, Some(text)) => {
            let line = json!({ "image_id": "query", "image_uri": "", "caption": text }).to_string();
            read_corpus(line.as_bytes(), &ValidationContext::new(Tokenizer::default(), None))?
        }
        _ => return Err(CliError::new("config", "give exactly one of --input or --text")),
    };
    let text_only = a.text.is_some();
    for q in &queries {
        for &mode in &a.modes {
            if text_only && mode.queries_image() {
                continue;
            }
            let query = if mode.queries_image() {
                backend.embed_image(&q.image)?
            } else {
                backend.embed_text(q.caption.tokens())?
            };
            for n in index.retrieve_topk(&query, mode, a.k)? {
                if a.threshold.is_some_and(|t| n.similarity <= t) {
                    continue;
                }
                rows.push(json!({ "query_id": q.image.id, "neighbor": n }));
            }
        }
    }
    match &a.output {
        Some(path) => write_jsonl(path, &rows)?,
        None => {
            let mut out = io::stdout().lock();
            for r in &rows {
                if writeln!(out, "{r}").is_err() {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.chunk_size == 0 {
        return Err(CliError::new("config", "chunk size must be positive"));
    }
    let factual: Vec<FactualPair> = load_corpus(&a.input, &a.labels.context()?)?;
    let index = Index::load(&a.index)?;
    let emb = embedder(&a.embedder)?;
    let gen = generator(&a.generator)?;
    let settings = GenerationSettings {
        modes: a.modes.clone(),
        threshold: a.threshold,
        seed: derive_seed(a.seed, &["generate"]),
    };

    let checkpoint_path = a.checkpoint.clone().unwrap_or_else(|| a.output.with_extension("checkpoint.json"));
    let events_path = a.events.clone().unwrap_or_else(|| a.output.with_extension("events.jsonl"));
    let identity = format!(
        "{}|{}|{}|{}|{:?}|{}|{}",
        pipeline::sha256_file(&a.input)?,
        pipeline::sha256_file(&a.index)?,
        a.embedder,
        a.generator,
        a.modes,
        a.threshold,
        a.seed
    );
    created(&a.output)?;
    created(&events_path)?;
    created(&checkpoint_path)?;
    let mut checkpoint = match Checkpoint::load(&checkpoint_path)? {
        Some(cp) if cp.config_hash == identity => cp,
        _ => Checkpoint::new(identity),
    };
    let mut outputs = Outputs::open(
        &[("candidates", a.output.clone()), ("events", events_path)],
        &checkpoint.outputs,
    )?;
    checkpoint.outputs = outputs.commit()?;
    checkpoint.save(&checkpoint_path)?;
    let resumed_from = checkpoint.next_offset;

    while checkpoint.next_offset < factual.len() {
        let start = checkpoint.next_offset;
        let end = (start + a.chunk_size).min(factual.len());
        let out = generate_candidates(&factual[start..end], &index, emb.as_ref(), gen.as_ref(), &settings)?;
        let mut buf = Vec::new();
        write_corpus(&out.candidates, &mut buf)?;
        outputs.append("candidates", &buf)?;
        let mut buf = Vec::new();
        for e in &out.events {
            serde_json::to_writer(&mut buf, e).expect("event serializes");
            buf.push(b'\n');
        }
        outputs.append("events", &buf)?;
        let counts = &mut checkpoint.counts;
        counts.processed = end;
        for (mode, n) in RetrievalMode::ALL.iter().zip(out.retrieved) {
            *counts.retrieved.entry(*mode).or_default() += n;
        }
        counts.filter.candidates += out.candidates.len();
        checkpoint.next_offset = end;
        checkpoint.outputs = outputs.commit()?;
        checkpoint.save(&checkpoint_path)?;
    }
    print_json(&json!({
        "processed": checkpoint.counts.processed,
        "resumed_from": resumed_from,
        "retrieved": checkpoint.counts.retrieved,
        "candidates": checkpoint.counts.filter.candidates,
    }));
    Ok(())
}

fn make_finetune(a: MakeFinetuneArgs) -> Result<()> {
    let corpus: Vec<AnnotatedStylizedSample> = load_corpus(&a.input, &a.labels.context()?)?;
    let pairs = make_finetune_pairs(&corpus);
    write_jsonl(&a.output, pairs.iter().map(|p| p.to_wire()))?;
    print_json(&json!({ "pairs": pairs.len() }));
    Ok(())
}

fn lm_config(lambda: &[f64], unk_threshold: u64) -> Result<LmConfig> {
    let lambda: [f64; 3] = lambda
        .try_into()
        .map_err(|_| CliError::new("config", "lambda takes exactly three weights"))?;
    let cfg = LmConfig { lambda, unk_threshold };
    cfg.validate()?;
    Ok(cfg)
}

fn lm_train(a: LmTrainArgs) -> Result<()> {
    let cfg = lm_config(&a.lambda, a.unk_threshold)?;
    let corpus: Vec<StylizedSample> = load_corpus(&a.input, &ValidationContext::new(Tokenizer::default(), None))?;
    let style = a.style.as_deref().map(StyleLabel::new);
    let sentences: Vec<Vec<String>> = corpus
        .iter()
        .filter(|s| style.as_ref().map_or(true, |st| &s.style == st))
        .map(|s| s.caption.tokens().to_vec())
        .collect();
    let model = TrigramModel::train(&sentences, cfg)?;
    model.save(created(&a.output)?)?;
    print_json(&json!({
        "sentences": sentences.len(),
        "vocab": model.vocab().len(),
        "train_perplexity": model.perplexity::<f64, _, _>(&sentences)?,
    }));
    Ok(())
}

fn lm_ppl(a: LmPplArgs) -> Result<()> {
    let model = TrigramModel::load(&a.model)?;
    let tokenizer = Tokenizer::default();
    let lines: Vec<String> = match (&a.input, &a.text) {
        (Some(path), None) => BufReader::new(fs::File::open(path)?).lines().collect::<io::Result<_>>()?,
        (None, Some(t)) => vec![t.clone()],
        _ => return Err(CliError::new("config", "give exactly one of --input or --text")),
    };
    let sentences = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenizer.tokenize(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::new("corpus", e))?;
    let ppl: f64 = model.perplexity(&sentences)?;
    let mut report = json!({ "sentences": sentences.len(), "perplexity": ppl });
    if a.per_line {
        let each = sentences
            .iter()
            .map(|s| model.perplexity::<f64, _, _>(std::slice::from_ref(s)))
            .collect::<Result<Vec<_>, _>>()?;
        report["per_line"] = json!(each);
    }
    print_json(&report);
    Ok(())
}

fn load_models(dir: &Path, labels: &LabelSet) -> Result<StyleModels> {
    let mut models = BTreeMap::new();
    for style in labels.styles() {
        let path = dir.join(format!("{style}.json"));
        if path.is_file() {
            models.insert(style.clone(), TrigramModel::load(&path)?);
        }
    }
    Ok(StyleModels::new(models))
}

fn filter(a: FilterArgs) -> Result<()> {
    let labels = a.labels.label_set()?;
    let candidates: Vec<GenerationCandidate> = load_corpus(&a.input, &a.labels.context()?)?;
    let models = load_models(&a.lm_dir, &labels)?;
    let backend = classifier(&a.classifier, &labels)?;
    let criteria = QualityCriteria {
        max_perplexity: a.max_perplexity,
        min_similarity: a.min_similarity,
        dedupe: !a.no_dedupe,
    };
    let outcome = filter_batch(&candidates, backend.as_ref(), &models, &criteria)?;
    save_corpus(&outcome.accepted, created(&a.output)?)?;
    if let Some(path) = &a.rejections {
        write_jsonl(path, outcome.log_records())?;
    }
    let summary: FilterSummary = outcome.summary();
    print_json(&summary);
    if outcome.any_fatal() {
        return Err(CliError::new("backend", "classifier became unavailable; some candidates were not evaluated"));
    }
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(c) = a.chunk_size {
        cfg.chunk_size = c;
    }
    if let Some(dir) = a.output_dir {
        cfg.paths.output_dir = dir;
    }
    let stop_after = a.stop_after;
    let mut observer = |p: &pipeline::Progress| {
        log::info!("{} of {} factual pairs done", p.next_offset, p.total);
        match stop_after {
            Some(n) if p.chunks_done >= n => Control::Halt,
            _ => Control::Continue,
        }
    };
    let report = augment(&cfg, &RunOptions { resume: !a.fresh }, &mut observer)?;
    print_json(&report);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let corpus: Vec<AugmentedPair> = load_corpus(&a.input, &a.labels.context()?)?;
    print_json(&pipeline::stats(&corpus));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let opts = options(None);
    let c = a.classifier.as_deref().map(|d| connect_classifier::<f64>(&d.parse()?, &opts)).transpose()?;
    let e = a.embedder.as_deref().map(|d| connect_embedder::<f64>(&d.parse()?, &opts)).transpose()?;
    let g = a.generator.as_deref().map(|d| connect_generator(&d.parse()?, &opts)).transpose()?;
    let server = || WireServer::new(c.as_deref(), e.as_deref(), g.as_deref());
    match &a.listen {
        None => server().serve(io::stdin().lock(), io::stdout().lock())?,
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
            std::thread::scope(|scope| {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(3600)));
                    scope.spawn(|| {
                        let reader = BufReader::new(stream.try_clone().expect("clone tcp stream"));
                        let _ = server().serve(reader, stream);
                    });
                }
            });
        }
    }
    Ok(())
}
