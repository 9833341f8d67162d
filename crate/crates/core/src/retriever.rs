//! Exact cosine-similarity retrieval over the annotated stylized corpus.
//!
//! Every annotated sample contributes one image vector and one caption
//! vector. Vectors are unit-normalized on construction, so similarity is a
//! plain dot product. Four query modes pair an image or text query with the
//! image or caption side of the index.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbedderBackend};
use crate::data::{AnnotatedStylizedSample, FactualPair, RetrievalMode, StyleLabel};
use crate::num::{dot, l2_norm, Scalar};

/// Default embedding width.
pub const DEFAULT_DIMENSION: usize = 768;

/// Default similarity a neighbor must exceed.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Tolerance on stored unit norms.
pub const UNIT_TOLERANCE: f64 = 1e-6;

const INDEX_FORMAT: &str = "stylegraft-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("zero or non-finite vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no retrieval mode enabled")]
    NoModes,
    #[error("sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A unit-length embedding and the norm it had before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
    norm: T,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Normalizes `raw`, recording its original norm.
    pub fn new(raw: Vec<T>) -> Result<Self, RetrievalError> {
        let norm = l2_norm(&raw);
        if raw.is_empty() || !norm.is_finite() || !(norm > T::zero()) {
            return Err(RetrievalError::ZeroVector);
        }
        let values = raw.into_iter().map(|v| v / norm).collect();
        Ok(Self { values, norm })
    }

    /// Adopts already normalized values without touching them.
    pub fn from_unit(values: Vec<T>, norm: T) -> Result<Self, RetrievalError> {
        let n = l2_norm(&values).to_f64_lossy();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) || !(norm > T::zero()) {
            return Err(RetrievalError::Format(format!("vector norm {n} is not unit")));
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            norm: U::from_f64_lossy(self.norm.to_f64_lossy()),
        }
    }
}

/// Cosine of the angle between two embeddings.
pub fn cosine_similarity<T: Scalar>(
    a: &EmbeddingVector<T>,
    b: &EmbeddingVector<T>,
) -> Result<T, RetrievalError> {
    if a.dimension() != b.dimension() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    Ok(dot(a.values(), b.values()))
}

/// Cosine of two raw vectors, `a·b / (‖a‖‖b‖)`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T, RetrievalError> {
    cosine_similarity(&EmbeddingVector::new(a.to_vec())?, &EmbeddingVector::new(b.to_vec())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry<T> {
    pub sample_id: String,
    pub style: StyleLabel,
    pub style_phrase: Vec<String>,
    pub vector: EmbeddingVector<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Image,
    Caption,
}

impl Side {
    pub fn of(mode: RetrievalMode) -> Self {
        if mode.targets_images() {
            Self::Image
        } else {
            Self::Caption
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneIndex<T> {
    dimension: usize,
    image_entries: Vec<IndexEntry<T>>,
    caption_entries: Vec<IndexEntry<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Neighbor<T> {
    pub sample_id: String,
    pub similarity: T,
    pub mode: RetrievalMode,
    pub style: StyleLabel,
    pub style_phrase: Vec<String>,
}

/// Ranking used by every search: similarity descending, then sample id.
fn rank<T: Scalar>(a: &(T, &IndexEntry<T>), b: &(T, &IndexEntry<T>)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.sample_id.cmp(&b.1.sample_id))
}

impl<T: Scalar> SceneIndex<T> {
    /// Assembles an index from precomputed entries.
    pub fn from_entries(
        dimension: usize,
        image_entries: Vec<IndexEntry<T>>,
        caption_entries: Vec<IndexEntry<T>>,
    ) -> Result<Self, RetrievalError> {
        if image_entries.is_empty() || caption_entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        for e in image_entries.iter().chain(&caption_entries) {
            if e.vector.dimension() != dimension {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dimension,
                    actual: e.vector.dimension(),
                });
            }
        }
        Ok(Self {
            dimension,
            image_entries,
            caption_entries,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self, side: Side) -> &[IndexEntry<T>] {
        match side {
            Side::Image => &self.image_entries,
            Side::Caption => &self.caption_entries,
        }
    }

    pub fn len(&self) -> usize {
        self.image_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_entries.is_empty()
    }

    /// The `k` most similar entries on the side `mode` targets.
    pub fn retrieve_topk(
        &self,
        query: &EmbeddingVector<T>,
        mode: RetrievalMode,
        k: usize,
    ) -> Result<Vec<Neighbor<T>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                actual: query.dimension(),
            });
        }
        let entries = self.entries(Side::of(mode));
        if entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let q = query.values();
        let mut scored: Vec<(T, &IndexEntry<T>)> =
            entries.iter().map(|e| (dot(q, e.vector.values()), e)).collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored
            .into_iter()
            .map(|(similarity, e)| Neighbor {
                sample_id: e.sample_id.clone(),
                similarity,
                mode,
                style: e.style.clone(),
                style_phrase: e.style_phrase.clone(),
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::read_from(File::open(path)?)
    }

    /// Writes a header line then one record per entry, image side first.
    pub fn write_to(&self, out: &mut impl Write) -> Result<(), RetrievalError> {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            dimension: self.dimension,
            entries: self.image_entries.len(),
        };
        serde_json::to_writer(&mut *out, &header).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
        for (side, entries) in [(Side::Image, &self.image_entries), (Side::Caption, &self.caption_entries)] {
            for e in entries {
                let rec = IndexRecord {
                    id: e.sample_id.clone(),
                    side,
                    style: e.style.clone(),
                    style_phrase: e.style_phrase.clone(),
                    norm: e.vector.norm().to_f64_lossy(),
                    vector: e.vector.values().iter().map(|v| v.to_f64_lossy()).collect(),
                };
                serde_json::to_writer(&mut *out, &rec).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self, RetrievalError> {
        let mut lines = BufReader::new(input).lines();
        let header: IndexHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)
                .map_err(|e| RetrievalError::Format(format!("header: {e}")))?,
            None => return Err(RetrievalError::Format("missing header".into())),
        };
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let (mut images, mut captions) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexRecord = serde_json::from_str(&line)
                .map_err(|e| RetrievalError::Format(format!("line {}: {e}", i + 2)))?;
            let values = rec.vector.into_iter().map(T::from_f64_lossy).collect();
            let entry = IndexEntry {
                sample_id: rec.id,
                style: rec.style,
                style_phrase: rec.style_phrase,
                vector: EmbeddingVector::from_unit(values, T::from_f64_lossy(rec.norm))
                    .map_err(|e| RetrievalError::Format(format!("line {}: {e}", i + 2)))?,
            };
            match rec.side {
                Side::Image => images.push(entry),
                Side::Caption => captions.push(entry),
            }
        }
        if images.len() != header.entries || captions.len() != header.entries {
            return Err(RetrievalError::Format(format!(
                "header declares {} entries per side, found {} images and {} captions",
                header.entries,
                images.len(),
                captions.len()
            )));
        }
        Self::from_entries(header.dimension, images, captions)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    dimension: usize,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    side: Side,
    style: StyleLabel,
    style_phrase: Vec<String>,
    norm: f64,
    vector: Vec<f64>,
}

fn embed_checked<T: Scalar>(
    dimension: usize,
    sample_id: &str,
    result: Result<EmbeddingVector<T>, BackendError>,
) -> Result<EmbeddingVector<T>, RetrievalError> {
    let v = result.map_err(|source| RetrievalError::Backend {
        sample_id: sample_id.to_string(),
        source,
    })?;
    if v.dimension() != dimension {
        return Err(RetrievalError::DimensionMismatch {
            expected: dimension,
            actual: v.dimension(),
        });
    }
    Ok(v)
}

/// Embeds every annotated sample's image and caption.
pub fn build_index<T: Scalar>(
    corpus: &[AnnotatedStylizedSample],
    embedder: &dyn EmbedderBackend<T>,
) -> Result<SceneIndex<T>, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let dimension = embedder.capabilities().dimension;
    let pairs: Vec<(IndexEntry<T>, IndexEntry<T>)> = corpus
        .par_iter()
        .map(|a| {
            let base = a.base();
            let image = embed_checked(dimension, a.id(), embedder.embed_image(&base.image))?;
            let text = embed_checked(dimension, a.id(), embedder.embed_text(base.caption.tokens()))?;
            let entry = |vector| IndexEntry {
                sample_id: a.id().to_string(),
                style: base.style.clone(),
                style_phrase: a.style_phrase().to_vec(),
                vector,
            };
            Ok((entry(image), entry(text)))
        })
        .collect::<Result<_, RetrievalError>>()?;
    let (images, captions) = pairs.into_iter().unzip();
    SceneIndex::from_entries(dimension, images, captions)
}

/// Top-1 neighbor per enabled mode whose similarity strictly exceeds
/// `threshold`, in the order the modes are given.
pub fn retrieve_scene<T: Scalar>(
    index: &SceneIndex<T>,
    pair: &FactualPair,
    embedder: &dyn EmbedderBackend<T>,
    modes: &[RetrievalMode],
    threshold: f64,
) -> Result<Vec<Neighbor<T>>, RetrievalError> {
    if modes.is_empty() {
        return Err(RetrievalError::NoModes);
    }
    let dimension = index.dimension();
    let id = pair.image.id.as_str();
    let image_query = if modes.iter().any(|m| m.queries_image()) {
        Some(embed_checked(dimension, id, embedder.embed_image(&pair.image))?)
    } else {
        None
    };
    let text_query = if modes.iter().any(|m| !m.queries_image()) {
        Some(embed_checked(dimension, id, embedder.embed_text(pair.caption.tokens()))?)
    } else {
        None
    };
    let threshold = T::from_f64_lossy(threshold);
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let query = if mode.queries_image() { &image_query } else { &text_query };
        let query = query.as_ref().expect("query embedded for every enabled mode");
        let best = index.retrieve_topk(query, mode, 1)?.into_iter().next();
        match best {
            Some(n) if n.similarity > threshold => out.push(n),
            Some(n) => debug!(
                "{id}: best {mode} neighbor {} at {} is not above threshold",
                n.sample_id, n.similarity
            ),
            None => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, v: Vec<f64>) -> IndexEntry<f64> {
        IndexEntry {
            sample_id: id.into(),
            style: "pos".into(),
            style_phrase: vec!["nice".into()],
            vector: EmbeddingVector::new(v).unwrap(),
        }
    }

    fn small_index() -> SceneIndex<f64> {
        SceneIndex::from_entries(
            2,
            vec![entry("a", vec![1.0, 0.0]), entry("b", vec![0.0, 1.0]), entry("c", vec![1.0, 1.0])],
            vec![entry("a", vec![0.0, 1.0]), entry("b", vec![1.0, 0.0]), entry("c", vec![-1.0, 0.0])],
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[3.0f64, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0f64, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-9);
        let c32 = cosine(&[1.0f32, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c32 - 8.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector)));
        assert!(matches!(
            cosine(&[1.0f64, 0.0], &[1.0, 0.0, 0.0]),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embedding_records_norm() {
        let v = EmbeddingVector::new(vec![3.0f64, 4.0]).unwrap();
        assert_eq!(v.norm(), 5.0);
        assert_eq!(v.values(), [0.6, 0.8]);
    }

    #[test]
    fn modes_search_their_side() {
        let idx = small_index();
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let i2i = idx.retrieve_topk(&q, RetrievalMode::I2i, 1).unwrap();
        assert_eq!(i2i[0].sample_id, "a");
        assert_eq!(i2i[0].similarity, 1.0);
        let t2t = idx.retrieve_topk(&q, RetrievalMode::T2t, 1).unwrap();
        assert_eq!(t2t[0].sample_id, "b");
        let all = idx.retrieve_topk(&q, RetrievalMode::I2t, 10).unwrap();
        let ids: Vec<&str> = all.iter().map(|n| n.sample_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(all[2].similarity, -1.0);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let idx = SceneIndex::from_entries(
            2,
            vec![entry("z", vec![1.0, 0.0]), entry("m", vec![2.0, 0.0]), entry("q", vec![0.0, 1.0])],
            vec![entry("z", vec![1.0, 0.0]), entry("m", vec![1.0, 0.0]), entry("q", vec![1.0, 0.0])],
        )
        .unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let r = idx.retrieve_topk(&q, RetrievalMode::T2i, 2).unwrap();
        assert_eq!(r[0].sample_id, "m");
        assert_eq!(r[1].sample_id, "z");
    }

    #[test]
    fn query_errors() {
        let idx = small_index();
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.retrieve_topk(&q, RetrievalMode::I2i, 0), Err(RetrievalError::ZeroK)));
        let q3 = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            idx.retrieve_topk(&q3, RetrievalMode::I2i, 1),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            SceneIndex::<f64>::from_entries(2, vec![], vec![]),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn index_file_round_trip() {
        let idx = small_index();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = SceneIndex::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        let f32_idx = SceneIndex::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(f32_idx.len(), 3);

        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(SceneIndex::<f64>::read_from(truncated.as_bytes()).is_err());
        assert!(SceneIndex::<f64>::read_from("".as_bytes()).is_err());
    }
}
