use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunCounts};

const CHECKPOINT_VERSION: u32 = 1;

/// Progress of a chunked stage: the first input not yet committed, and the
/// committed length of every output file at that point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub next_offset: usize,
    pub outputs: BTreeMap<String, u64>,
    pub counts: RunCounts,
}

impl Checkpoint {
    pub fn new(config_hash: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash,
            next_offset: 0,
            outputs: BTreeMap::new(),
            counts: RunCounts::default(),
        }
    }

    /// `None` when the file does not exist.
    pub fn load(path: &Path) -> Result<Option<Self>, PipelineError> {
        match fs::read_to_string(path) {
            Ok(text) => {
                let cp: Self = serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
                if cp.version != CHECKPOINT_VERSION {
                    return Err(PipelineError::Checkpoint(format!("unsupported version {}", cp.version)));
                }
                Ok(Some(cp))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::io(path, e)),
        }
    }

    /// Writes beside the target and renames, so a crash leaves either the
    /// old or the new checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(&tmp, text + "\n").map_err(|e| PipelineError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }
}

/// Append-only output files of a chunked stage.
pub struct Outputs {
    files: Vec<(String, PathBuf, File)>,
}

impl Outputs {
    /// Opens each `(name, path)` for appending after truncating it to the
    /// length recorded in `committed` (zero when absent).
    pub fn open(specs: &[(&str, PathBuf)], committed: &BTreeMap<String, u64>) -> Result<Self, PipelineError> {
        let mut files = Vec::with_capacity(specs.len());
        for (name, path) in specs {
            let len = committed.get(*name).copied().unwrap_or(0);
            let mut f = OpenOptions::new()
                .create(true)
                .truncate(false)
                .read(true)
                .write(true)
                .open(path)
                .map_err(|e| PipelineError::io(path, e))?;
            let actual = f.metadata().map_err(|e| PipelineError::io(path, e))?.len();
            if actual < len {
                return Err(PipelineError::Checkpoint(format!(
                    "{} is shorter ({actual} bytes) than its checkpoint ({len} bytes)",
                    path.display()
                )));
            }
            f.set_len(len).map_err(|e| PipelineError::io(path, e))?;
            f.seek(SeekFrom::End(0)).map_err(|e| PipelineError::io(path, e))?;
            files.push((name.to_string(), path.clone(), f));
        }
        Ok(Self { files })
    }

    pub fn append(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let (_, path, f) = self
            .files
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .expect("output registered at open");
        f.write_all(bytes).map_err(|e| PipelineError::io(&*path, e))
    }

    /// Flushes to disk and reports the committed lengths.
    pub fn commit(&mut self) -> Result<BTreeMap<String, u64>, PipelineError> {
        let mut lens = BTreeMap::new();
        for (name, path, f) in &mut self.files {
            f.flush().map_err(|e| PipelineError::io(&*path, e))?;
            f.sync_data().map_err(|e| PipelineError::io(&*path, e))?;
            let len = f.stream_position().map_err(|e| PipelineError::io(&*path, e))?;
            lens.insert(name.clone(), len);
        }
        Ok(lens)
    }
}
