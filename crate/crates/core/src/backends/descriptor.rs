//! Backend descriptor strings.
//!
//! * `ref:classifier:lexicon=<path>[,heads=4][,layers=6][,head=1][,layer=2][,seed=0]`
//! * `ref:embedder[:dim=768][,seed=0]`
//! * `ref:generator`
//! * `proc:<command line>` spawns an adapter and speaks the wire protocol
//!   over its standard streams.
//! * `tcp:<host>:<port>` connects to a listening adapter.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use super::reference::{ClassifierShape, Lexicon, ReferenceClassifier, ReferenceEmbedder, ReferenceGenerator};
use super::wire::{Address, RemoteClassifier, RemoteEmbedder, RemoteGenerator, WirePool};
use super::{BackendError, ClassifierBackend, EmbedderBackend, GeneratorBackend, Modality};
use crate::data::LabelSet;
use crate::num::Scalar;
use crate::retriever::DEFAULT_DIMENSION;

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceKind {
    Classifier { lexicon: PathBuf, shape: ClassifierShape },
    Embedder { dimension: usize, seed: u64 },
    Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Descriptor {
    Reference(ReferenceKind),
    Remote(Address),
}

fn bad(msg: impl Into<String>) -> BackendError {
    BackendError::Descriptor(msg.into())
}

fn options(spec: &str) -> Result<Vec<(&str, &str)>, BackendError> {
    spec.split(',')
        .filter(|kv| !kv.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected key=value, got '{kv}'")))
        })
        .collect()
}

fn number<N: FromStr>(key: &str, value: &str) -> Result<N, BackendError> {
    value.parse().map_err(|_| bad(format!("{key}: '{value}' is not a valid number")))
}

impl FromStr for Descriptor {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("proc:") {
            let argv = shell_words::split(cmd).map_err(|e| bad(format!("proc command: {e}")))?;
            if argv.is_empty() {
                return Err(bad("proc: needs a command"));
            }
            return Ok(Self::Remote(Address::Process(argv)));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.rsplit_once(':').map_or(true, |(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
                return Err(bad(format!("tcp: expects host:port, got '{addr}'")));
            }
            return Ok(Self::Remote(Address::Tcp(addr.to_string())));
        }
        let Some(rest) = s.strip_prefix("ref:") else {
            return Err(bad(format!("'{s}' is not a ref:, proc: or tcp: descriptor")));
        };
        let (kind, spec) = rest.split_once(':').unwrap_or((rest, ""));
        let opts = options(spec)?;
        let kind = match kind {
            "classifier" => {
                let mut shape = ClassifierShape::default();
                let mut lexicon = None;
                for (k, v) in opts {
                    match k {
                        "lexicon" => lexicon = Some(PathBuf::from(v)),
                        "heads" => shape.head_count = number(k, v)?,
                        "layers" => shape.layer_count = number(k, v)?,
                        "head" => shape.focus.head = number(k, v)?,
                        "layer" => shape.focus.layer = number(k, v)?,
                        "seed" => shape.seed = number(k, v)?,
                        _ => return Err(bad(format!("unknown classifier option '{k}'"))),
                    }
                }
                let lexicon = lexicon.ok_or_else(|| bad("ref:classifier needs lexicon=<path>"))?;
                ReferenceKind::Classifier { lexicon, shape }
            }
            "embedder" => {
                let (mut dimension, mut seed) = (DEFAULT_DIMENSION, 0);
                for (k, v) in opts {
                    match k {
                        "dim" => dimension = number(k, v)?,
                        "seed" => seed = number(k, v)?,
                        _ => return Err(bad(format!("unknown embedder option '{k}'"))),
                    }
                }
                ReferenceKind::Embedder { dimension, seed }
            }
            "generator" => {
                if let Some((k, _)) = opts.first() {
                    return Err(bad(format!("unknown generator option '{k}'")));
                }
                ReferenceKind::Generator
            }
            other => return Err(bad(format!("unknown reference backend '{other}'"))),
        };
        Ok(Self::Reference(kind))
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Reference(ReferenceKind::Classifier { lexicon, shape }) => write!(
                f,
                "ref:classifier:lexicon={},heads={},layers={},head={},layer={},seed={}",
                lexicon.display(),
                shape.head_count,
                shape.layer_count,
                shape.focus.head,
                shape.focus.layer,
                shape.seed
            ),
            Self::Reference(ReferenceKind::Embedder { dimension, seed }) => {
                write!(f, "ref:embedder:dim={dimension},seed={seed}")
            }
            Self::Reference(ReferenceKind::Generator) => f.write_str("ref:generator"),
            Self::Remote(Address::Process(argv)) => write!(f, "proc:{}", shell_words::join(argv)),
            Self::Remote(Address::Tcp(addr)) => write!(f, "tcp:{addr}"),
        }
    }
}

/// What a connection must satisfy, and how to make it.
#[derive(Clone, Debug)]
pub struct ConnectOptions {
    /// Relative lexicon paths resolve against this directory.
    pub base_dir: PathBuf,
    /// Handshake and per-request timeout for remote endpoints.
    pub timeout: Duration,
    /// Worker threads that will call the backend concurrently.
    pub workers: usize,
    /// Labels the classifier must report, exactly.
    pub labels: Option<LabelSet>,
    /// Embedding width the embedder must report.
    pub dimension: Option<usize>,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            base_dir: PathBuf::from("."),
            timeout: Duration::from_secs(30),
            workers: rayon::current_num_threads(),
            labels: None,
            dimension: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn pool(address: &Address, opts: &ConnectOptions) -> Result<WirePool, BackendError> {
    WirePool::open(address, opts.workers, opts.timeout)
}

pub fn connect_classifier<T: Scalar>(
    descriptor: &Descriptor,
    opts: &ConnectOptions,
) -> Result<Box<dyn ClassifierBackend<T>>, BackendError> {
    let backend: Box<dyn ClassifierBackend<T>> = match descriptor {
        Descriptor::Reference(ReferenceKind::Classifier { lexicon, shape }) => {
            let lexicon = Lexicon::load(resolve(&opts.base_dir, lexicon))?;
            Box::new(ReferenceClassifier::new(lexicon, *shape)?)
        }
        Descriptor::Remote(address) => Box::new(RemoteClassifier::new(pool(address, opts)?)?),
        other => return Err(bad(format!("'{other}' is not a classifier"))),
    };
    let caps = backend.capabilities();
    if caps.head_count == 0 || caps.layer_count == 0 {
        return Err(BackendError::Capability("classifier declares no heads or layers".into()));
    }
    if let Some(labels) = &opts.labels {
        if !labels.same_members(&caps.labels) {
            let want: Vec<String> = labels.all().map(|l| l.to_string()).collect();
            let got: Vec<String> = caps.labels.iter().map(|l| l.to_string()).collect();
            return Err(BackendError::Capability(format!(
                "classifier labels [{}] differ from configured labels [{}]",
                got.join(", "),
                want.join(", ")
            )));
        }
    }
    Ok(backend)
}

pub fn connect_embedder<T: Scalar>(
    descriptor: &Descriptor,
    opts: &ConnectOptions,
) -> Result<Box<dyn EmbedderBackend<T>>, BackendError> {
    let backend: Box<dyn EmbedderBackend<T>> = match descriptor {
        Descriptor::Reference(ReferenceKind::Embedder { dimension, seed }) => {
            Box::new(ReferenceEmbedder::new(*dimension, *seed)?)
        }
        Descriptor::Remote(address) => Box::new(RemoteEmbedder::new(pool(address, opts)?)?),
        other => return Err(bad(format!("'{other}' is not an embedder"))),
    };
    let caps = backend.capabilities();
    if let Some(d) = opts.dimension {
        if caps.dimension != d {
            return Err(BackendError::Capability(format!(
                "embedder dimension {} differs from expected {d}",
                caps.dimension
            )));
        }
    }
    for m in [Modality::Text, Modality::Image] {
        if !caps.modalities.contains(&m) {
            return Err(BackendError::Capability(format!("embedder lacks the {m:?} modality")));
        }
    }
    Ok(backend)
}

pub fn connect_generator(
    descriptor: &Descriptor,
    opts: &ConnectOptions,
) -> Result<Box<dyn GeneratorBackend>, BackendError> {
    match descriptor {
        Descriptor::Reference(ReferenceKind::Generator) => Ok(Box::new(ReferenceGenerator::default())),
        Descriptor::Remote(address) => Ok(Box::new(RemoteGenerator::new(pool(address, opts)?)?)),
        other => Err(bad(format!("'{other}' is not a generator"))),
    }
}
