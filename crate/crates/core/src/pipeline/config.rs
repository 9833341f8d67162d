use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backends::Descriptor;
use crate::data::{LabelSet, RetrievalMode};
use crate::extractor::ExtractorConfig;
use crate::filter::QualityCriteria;
use crate::lm::LmConfig;
use crate::retriever::DEFAULT_THRESHOLD;

fn default_chunk() -> usize {
    64
}

fn default_workers() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_timeout() -> u64 {
    30
}

/// Everything an `augment` run depends on. Relative paths are resolved
/// against the directory of the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Factual pairs generated and filtered between checkpoints.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    pub labels: Vec<String>,
    #[serde(default)]
    pub factual_label: Option<String>,
    pub paths: Paths,
    #[serde(default)]
    pub extract: ExtractorConfig,
    #[serde(default)]
    pub retrieve: RetrieveConfig,
    #[serde(default)]
    pub filter: QualityCriteria,
    #[serde(default)]
    pub lm: LmConfig,
    pub backends: BackendConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub stylized: PathBuf,
    pub factual: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `checkpoint.json` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub modes: Vec<RetrievalMode>,
    pub threshold: f64,
    /// Embedding width the embedder must declare, if pinned.
    #[serde(default)]
    pub dimension: Option<usize>,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            modes: RetrievalMode::ALL.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            dimension: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub classifier: String,
    pub embedder: String,
    pub generator: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Send the fine-tuning pairs to the generator before generating.
    #[serde(default = "yes")]
    pub finetune: bool,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`, including the
    /// lexicon path inside a reference classifier descriptor.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.stylized);
        fix(&mut self.paths.factual);
        fix(&mut self.paths.output_dir);
        if let Some(c) = self.paths.checkpoint.as_mut() {
            fix(c);
        }
        if let Ok(Descriptor::Reference(crate::backends::ReferenceKind::Classifier { mut lexicon, shape })) =
            self.backends.classifier.parse::<Descriptor>()
        {
            fix(&mut lexicon);
            self.backends.classifier =
                Descriptor::Reference(crate::backends::ReferenceKind::Classifier { lexicon, shape }).to_string();
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.label_set()?;
        self.extract.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.filter.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.lm.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.retrieve.modes.is_empty() {
            return bad("retrieve.modes is empty".into());
        }
        if !(-1.0..=1.0).contains(&self.retrieve.threshold) {
            return bad(format!("retrieve.threshold {} outside [-1, 1]", self.retrieve.threshold));
        }
        if self.workers == 0 || self.chunk_size == 0 {
            return bad("workers and chunk_size must be positive".into());
        }
        for (name, d) in [
            ("classifier", &self.backends.classifier),
            ("embedder", &self.backends.embedder),
            ("generator", &self.backends.generator),
        ] {
            d.parse::<Descriptor>()
                .map_err(|e| PipelineError::Config(format!("backends.{name}: {e}")))?;
        }
        for (name, p) in [("stylized", &self.paths.stylized), ("factual", &self.paths.factual)] {
            if !p.is_file() {
                return bad(format!("paths.{name}: {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet, PipelineError> {
        LabelSet::new(
            self.labels.iter().map(|l| l.as_str().into()).collect(),
            self.factual_label.as_deref().map(Into::into),
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("checkpoint.json"))
    }
}
