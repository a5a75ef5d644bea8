//! Exhaustive Euclidean nearest-neighbour stores for demonstration retrieval.
//!
//! One index holds whole training conversations (for emotion demonstrations);
//! eighteen more hold context windows partitioned by (emotion, position) for
//! cause demonstrations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, EmotionLabel};
use crate::gateway::{complete, Backend, GatewayError, ModelRequest};
use crate::windowing::{extract_window, PositionClass};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("selection does not cover all emotion categories; missing {missing:?}")]
    Coverage { missing: Vec<EmotionLabel> },
    #[error("unknown conversation {0:?} in selection")]
    UnknownConversation(String),
    #[error("vector has dimension {found}, index expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("vector for {0:?} has non-finite components")]
    NonFinite(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedding failed: {0}")]
    Embedder(#[from] GatewayError),
    #[error("conversation {conversation}: utterance {utterance} lacks a gold emotion")]
    MissingGold { conversation: String, utterance: u32 },
    #[error("index file {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Turns text into a fixed-length vector.
pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

/// Embeds through a gateway backend, pinning the dimension on first use.
pub struct GatewayEmbedder<'a> {
    backend: &'a dyn Backend,
    model_id: String,
    dimension: OnceLock<usize>,
}

impl<'a> GatewayEmbedder<'a> {
    pub fn new(backend: &'a dyn Backend, model_id: impl Into<String>) -> Self {
        GatewayEmbedder {
            backend,
            model_id: model_id.into(),
            dimension: OnceLock::new(),
        }
    }
}

impl Embedder for GatewayEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let response = complete(&ModelRequest::embedding(&self.model_id, text), self.backend)?;
        let vector = response.as_embedding().unwrap_or_default().to_vec();
        let expected = *self.dimension.get_or_init(|| vector.len());
        if vector.len() != expected {
            return Err(RetrievalError::Dimension {
                expected,
                found: vector.len(),
            });
        }
        Ok(vector)
    }
}

impl<F> Embedder for F
where
    F: Fn(&str) -> Result<Vec<f32>, RetrievalError>,
{
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        self(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub vector: Vec<f32>,
    pub payload_ref: String,
}

/// One of the eighteen (emotion, position) cause partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IndexKey {
    pub emotion: EmotionLabel,
    pub position: PositionClass,
}

impl IndexKey {
    pub fn new(emotion: EmotionLabel, position: PositionClass) -> Option<Self> {
        (!emotion.is_neutral()).then_some(IndexKey { emotion, position })
    }

    pub fn all() -> impl Iterator<Item = IndexKey> {
        EmotionLabel::EMOTIONAL.into_iter().flat_map(|emotion| {
            PositionClass::ALL
                .into_iter()
                .map(move |position| IndexKey { emotion, position })
        })
    }
}

impl fmt::Display for IndexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.emotion, self.position)
    }
}

impl FromStr for IndexKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (emotion, position) = s.split_once(['_', '/']).ok_or_else(|| format!("bad index key {s:?}"))?;
        let emotion = emotion.parse::<EmotionLabel>().map_err(|e| e.to_string())?;
        IndexKey::new(emotion, position.parse()?).ok_or_else(|| format!("neutral index key {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Conversation,
    Cause(IndexKey),
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Conversation => f.write_str("conversation"),
            Partition::Cause(key) => write!(f, "{key}"),
        }
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "conversation" {
            Ok(Partition::Conversation)
        } else {
            s.parse().map(Partition::Cause)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    partition: Partition,
    records: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<'a> {
    pub record: &'a EmbeddingRecord,
    pub distance: f64,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    dimension: usize,
    partition: String,
    records: Vec<EmbeddingRecord>,
}

impl VectorIndex {
    pub fn new(dimension: usize, partition: Partition) -> Self {
        VectorIndex {
            dimension,
            partition,
            records: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.key == key)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), RetrievalError> {
        if record.vector.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                found: record.vector.len(),
            });
        }
        if record.vector.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite(record.key));
        }
        if self.get(&record.key).is_some() {
            return Err(RetrievalError::DuplicateKey(record.key));
        }
        self.records.push(record);
        Ok(())
    }

    /// The `k` closest records by Euclidean distance, ties broken by key.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor<'_>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if query.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                found: query.len(),
            });
        }
        if self.records.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut scored: Vec<Neighbor<'_>> = self
            .records
            .iter()
            .map(|record| Neighbor {
                record,
                distance: euclidean(&record.vector, query),
            })
            .collect();
        scored.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.record.key.cmp(&b.record.key))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&IndexFile {
            dimension: self.dimension,
            partition: self.partition.to_string(),
            records: self.records.clone(),
        })
        .expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: IndexFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut index = VectorIndex::new(file.dimension, file.partition.parse()?);
        for record in file.records {
            index.insert(record).map_err(|e| e.to_string())?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| RetrievalError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let io = |message: String| RetrievalError::Io {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        VectorIndex::from_json(&text).map_err(io)
    }
}

/// Index whose dimension is fixed by its first record.
fn index_from(partition: Partition, records: Vec<EmbeddingRecord>) -> Result<VectorIndex, RetrievalError> {
    let dimension = records.first().map_or(0, |r| r.vector.len());
    let mut index = VectorIndex::new(dimension, partition);
    for record in records {
        index.insert(record)?;
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub records: usize,
    pub covered: BTreeSet<EmotionLabel>,
}

/// Embeds the selected training conversations into one index. The selection
/// must jointly cover all seven emotion categories.
pub fn build_conversation_index(
    train_corpus: &[Conversation],
    selection: &[String],
    embedder: &dyn Embedder,
) -> Result<(VectorIndex, BuildReport), RetrievalError> {
    let by_id: BTreeMap<&str, &Conversation> = train_corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let chosen = selection
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| RetrievalError::UnknownConversation(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let covered: BTreeSet<EmotionLabel> = chosen
        .iter()
        .flat_map(|c| c.utterances.iter().filter_map(|u| u.gold_emotion))
        .collect();
    let missing: Vec<EmotionLabel> = EmotionLabel::ALL.into_iter().filter(|l| !covered.contains(l)).collect();
    if !missing.is_empty() {
        return Err(RetrievalError::Coverage { missing });
    }

    let records = chosen
        .iter()
        .map(|c| {
            Ok(EmbeddingRecord {
                key: c.id.clone(),
                vector: embedder.embed(&c.plain_text())?,
                payload_ref: c.id.clone(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let index = index_from(Partition::Conversation, records)?;
    let report = BuildReport {
        records: index.len(),
        covered,
    };
    Ok((index, report))
}

/// Embeds the context window of every gold-emotional utterance and files it
/// under its (emotion, position) key. All eighteen keys are present.
pub fn build_cause_indices(
    train_corpus: &[Conversation],
    embedder: &dyn Embedder,
) -> Result<BTreeMap<IndexKey, VectorIndex>, RetrievalError> {
    let mut buckets: BTreeMap<IndexKey, Vec<EmbeddingRecord>> = IndexKey::all().map(|k| (k, Vec::new())).collect();
    for conv in train_corpus {
        for u in &conv.utterances {
            let emotion = u.gold_emotion.ok_or_else(|| RetrievalError::MissingGold {
                conversation: conv.id.clone(),
                utterance: u.id,
            })?;
            if emotion.is_neutral() {
                continue;
            }
            let window = extract_window(conv, u.id).expect("utterance id within its own conversation");
            let key = window.key();
            let record = EmbeddingRecord {
                vector: embedder.embed(&window.plain_text(conv))?,
                payload_ref: key.clone(),
                key,
            };
            buckets
                .get_mut(&IndexKey {
                    emotion,
                    position: window.position,
                })
                .expect("all keys pre-seeded")
                .push(record);
        }
    }
    let dimension = buckets.values().flatten().next().map_or(0, |r| r.vector.len());
    buckets
        .into_iter()
        .map(|(key, records)| {
            let mut index = VectorIndex::new(dimension, Partition::Cause(key));
            for record in records {
                index.insert(record)?;
            }
            Ok((key, index))
        })
        .collect()
}

pub fn save_cause_indices(
    dir: impl AsRef<Path>,
    indices: &BTreeMap<IndexKey, VectorIndex>,
) -> Result<(), RetrievalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RetrievalError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    for (key, index) in indices {
        index.save(dir.join(format!("{key}.json")))?;
    }
    Ok(())
}

pub fn load_cause_indices(dir: impl AsRef<Path>) -> Result<BTreeMap<IndexKey, VectorIndex>, RetrievalError> {
    let dir = dir.as_ref();
    IndexKey::all()
        .map(|key| Ok((key, VectorIndex::load(dir.join(format!("{key}.json")))?)))
        .collect()
}
