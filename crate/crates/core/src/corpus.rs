//! Conversation corpora with gold emotion and cause annotations.
//!
//! The on-disk shape follows the ECF-style JSON used by the shared task: a
//! top-level array of conversations, each with an utterance list and
//! `"emotion-cause_pairs"` given as `["<utt>_<emotion>", "<utt>"]` strings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PredictionDocument;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("conversation {conversation}: {message}")]
    Schema { conversation: String, message: String },
    #[error("conversation {conversation}: pair {pair:?} references utterance {utterance} outside 1..={len}")]
    DanglingRef {
        conversation: String,
        pair: [String; 2],
        utterance: u32,
        len: usize,
    },
    #[error("conversation {conversation}, utterance {utterance}: no gold emotion")]
    MissingGold { conversation: String, utterance: u32 },
    #[error("corpus is empty")]
    Empty,
    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),
}

/// The seven emotion categories of the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Neutral,
    ];

    /// Every label except neutral.
    pub const EMOTIONAL: [EmotionLabel; 6] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Neutral => "neutral",
        }
    }

    pub fn is_neutral(self) -> bool {
        self == EmotionLabel::Neutral
    }

    /// Position in [`EmotionLabel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        EmotionLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == lower)
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: u32,
    pub speaker: String,
    pub text: String,
    /// Opaque media reference (video file or frame directory).
    pub video_ref: Option<String>,
    pub gold_emotion: Option<EmotionLabel>,
}

impl Utterance {
    /// `Speaker: text`, the line shape used in prompts and embeddings.
    pub fn line(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

/// An (emotion utterance, emotion, cause utterance) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmotionCausePair {
    pub emotion_utt_id: u32,
    pub emotion: EmotionLabel,
    pub cause_utt_id: u32,
}

impl EmotionCausePair {
    /// Fails for neutral emotions, which never take part in a pair.
    pub fn new(emotion_utt_id: u32, emotion: EmotionLabel, cause_utt_id: u32) -> Option<Self> {
        (!emotion.is_neutral()).then_some(EmotionCausePair {
            emotion_utt_id,
            emotion,
            cause_utt_id,
        })
    }

    /// Signed offset `cause - emotion`; zero for self-causes.
    pub fn offset(&self) -> i64 {
        i64::from(self.cause_utt_id) - i64::from(self.emotion_utt_id)
    }

    pub fn is_self_cause(&self) -> bool {
        self.cause_utt_id == self.emotion_utt_id
    }

    /// `["3_joy", "2"]`
    pub fn to_strings(&self) -> [String; 2] {
        [
            format!("{}_{}", self.emotion_utt_id, self.emotion),
            self.cause_utt_id.to_string(),
        ]
    }

    /// Parses the string pair shape. The cause side may carry a `_<span>`
    /// suffix (span-annotated data); only the leading id is kept.
    pub fn parse_strings(pair: &[String; 2]) -> Result<(u32, EmotionLabel, u32), String> {
        let (id, label) = pair[0]
            .split_once('_')
            .ok_or_else(|| format!("emotion side {:?} is not <id>_<emotion>", pair[0]))?;
        let emotion_id = id
            .trim()
            .parse::<u32>()
            .map_err(|_| format!("bad utterance id {id:?}"))?;
        let emotion = label.parse::<EmotionLabel>().map_err(|e| e.to_string())?;
        let cause = pair[1].split('_').next().unwrap_or_default().trim();
        let cause_id = cause
            .parse::<u32>()
            .map_err(|_| format!("bad cause id {:?}", pair[1]))?;
        Ok((emotion_id, emotion, cause_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub gold_pairs: BTreeSet<EmotionCausePair>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, id: u32) -> Option<&Utterance> {
        if id == 0 {
            return None;
        }
        self.utterances.get(id as usize - 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.utterances.iter().map(|u| u.id)
    }

    /// Gold emotions keyed by utterance id; `None` if any utterance lacks one.
    pub fn gold_emotions(&self) -> Option<BTreeMap<u32, EmotionLabel>> {
        self.utterances
            .iter()
            .map(|u| u.gold_emotion.map(|e| (u.id, e)))
            .collect()
    }

    /// Gold cause ids of one emotion utterance.
    pub fn gold_causes_of(&self, emotion_utt_id: u32) -> BTreeSet<u32> {
        self.gold_pairs
            .iter()
            .filter(|p| p.emotion_utt_id == emotion_utt_id)
            .map(|p| p.cause_utt_id)
            .collect()
    }

    /// One `Speaker: text` line per utterance.
    pub fn plain_text(&self) -> String {
        self.utterances
            .iter()
            .map(Utterance::line)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    NativeJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawConversation {
    #[serde(rename = "conversation_ID")]
    conversation_id: serde_json::Value,
    conversation: Vec<RawUtterance>,
    #[serde(rename = "emotion-cause_pairs", default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<[String; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawUtterance {
    #[serde(rename = "utterance_ID")]
    utterance_id: u32,
    text: String,
    speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_name: Option<String>,
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Conversation>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        CorpusFormat::NativeJson => parse_corpus(&text),
    }
}

pub fn parse_corpus(json: &str) -> Result<Vec<Conversation>, CorpusError> {
    let raw: Vec<RawConversation> = serde_json::from_str(json)?;
    raw.into_iter().map(convert).collect()
}

fn conversation_id(value: &serde_json::Value) -> Result<String, CorpusError> {
    match value {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(CorpusError::Schema {
            conversation: other.to_string(),
            message: "conversation_ID must be a string or integer".into(),
        }),
    }
}

fn convert(raw: RawConversation) -> Result<Conversation, CorpusError> {
    let id = conversation_id(&raw.conversation_id)?;
    let schema = |message: String| CorpusError::Schema {
        conversation: id.clone(),
        message,
    };

    let mut utterances = raw
        .conversation
        .into_iter()
        .map(|u| {
            let gold_emotion = u
                .emotion
                .as_deref()
                .map(str::parse::<EmotionLabel>)
                .transpose()
                .map_err(|e| schema(format!("utterance {}: {e}", u.utterance_id)))?;
            Ok(Utterance {
                id: u.utterance_id,
                speaker: u.speaker,
                text: u.text,
                video_ref: u.video_name,
                gold_emotion,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    utterances.sort_by_key(|u| u.id);

    if utterances.is_empty() {
        return Err(schema("conversation has no utterances".into()));
    }
    for (pos, u) in utterances.iter().enumerate() {
        if u.id as usize != pos + 1 {
            return Err(schema(format!(
                "utterance ids are not contiguous from 1 (found {} at position {})",
                u.id,
                pos + 1
            )));
        }
        if u.text.trim().is_empty() {
            return Err(schema(format!("utterance {} has empty text", u.id)));
        }
    }

    let len = utterances.len();
    let mut gold_pairs = BTreeSet::new();
    for pair in raw.pairs.unwrap_or_default() {
        let (e_id, emotion, c_id) = EmotionCausePair::parse_strings(&pair).map_err(&schema)?;
        if emotion.is_neutral() {
            return Err(schema(format!("pair {pair:?} carries the neutral emotion")));
        }
        for utt in [e_id, c_id] {
            if utt == 0 || utt as usize > len {
                return Err(CorpusError::DanglingRef {
                    conversation: id.clone(),
                    pair,
                    utterance: utt,
                    len,
                });
            }
        }
        if let Some(gold) = utterances[e_id as usize - 1].gold_emotion {
            if gold != emotion {
                return Err(schema(format!(
                    "pair {pair:?} says {emotion} but utterance {e_id} is labeled {gold}"
                )));
            }
        }
        gold_pairs.insert(EmotionCausePair {
            emotion_utt_id: e_id,
            emotion,
            cause_utt_id: c_id,
        });
    }

    Ok(Conversation {
        id,
        utterances,
        gold_pairs,
    })
}

fn to_raw(conversation: &Conversation) -> RawConversation {
    RawConversation {
        conversation_id: serde_json::Value::String(conversation.id.clone()),
        conversation: conversation
            .utterances
            .iter()
            .map(|u| RawUtterance {
                utterance_id: u.id,
                text: u.text.clone(),
                speaker: u.speaker.clone(),
                emotion: u.gold_emotion.map(|e| e.to_string()),
                video_name: u.video_ref.clone(),
            })
            .collect(),
        pairs: Some(
            conversation
                .gold_pairs
                .iter()
                .map(EmotionCausePair::to_strings)
                .collect(),
        ),
    }
}

pub fn corpus_to_json(corpus: &[Conversation]) -> String {
    let raw: Vec<RawConversation> = corpus.iter().map(to_raw).collect();
    serde_json::to_string_pretty(&raw).expect("corpus serializes")
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Conversation]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, corpus_to_json(corpus)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Descriptive statistics over a gold-annotated corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_conversations: usize,
    pub n_utterances: usize,
    pub n_emotional: usize,
    pub n_self_causal: usize,
    pub n_non_self_causal: usize,
    pub n_no_cause_emotional: usize,
    pub n_later_causal: usize,
    pub n_pairs: usize,
    pub emotion_histogram: BTreeMap<EmotionLabel, usize>,
    /// `cause_id - emotion_id` → pair count.
    pub relative_position_histogram: BTreeMap<i64, usize>,
}

impl DatasetStats {
    fn pair_fraction(&self, keep: impl Fn(i64) -> bool) -> f64 {
        if self.n_pairs == 0 {
            return 0.0;
        }
        let hits: usize = self
            .relative_position_histogram
            .iter()
            .filter(|(off, _)| keep(**off))
            .map(|(_, n)| n)
            .sum();
        hits as f64 / self.n_pairs as f64
    }

    /// Share of pair instances whose cause is the emotion utterance itself.
    pub fn self_cause_fraction(&self) -> f64 {
        self.pair_fraction(|off| off == 0)
    }

    /// Share of pair instances whose cause comes after the emotion utterance.
    pub fn later_cause_fraction(&self) -> f64 {
        self.pair_fraction(|off| off > 0)
    }

    /// Share of pair instances with offset in `[-5, 0]`.
    pub fn recent_cause_fraction(&self) -> f64 {
        self.pair_fraction(|off| (-5..=0).contains(&off))
    }
}

pub fn compute_stats(corpus: &[Conversation]) -> Result<DatasetStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut stats = DatasetStats {
        emotion_histogram: EmotionLabel::ALL.iter().map(|l| (*l, 0)).collect(),
        ..DatasetStats::default()
    };
    stats.n_conversations = corpus.len();

    for conv in corpus {
        for u in &conv.utterances {
            let emotion = u.gold_emotion.ok_or_else(|| CorpusError::MissingGold {
                conversation: conv.id.clone(),
                utterance: u.id,
            })?;
            stats.n_utterances += 1;
            *stats.emotion_histogram.entry(emotion).or_default() += 1;
            if emotion.is_neutral() {
                continue;
            }
            stats.n_emotional += 1;
            let causes = conv.gold_causes_of(u.id);
            if causes.is_empty() {
                stats.n_no_cause_emotional += 1;
            } else if causes.contains(&u.id) {
                stats.n_self_causal += 1;
            } else {
                stats.n_non_self_causal += 1;
            }
            if causes.iter().any(|c| *c > u.id) {
                stats.n_later_causal += 1;
            }
        }
        for pair in &conv.gold_pairs {
            stats.n_pairs += 1;
            *stats.relative_position_histogram.entry(pair.offset()).or_default() += 1;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub conversation_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Lists every prediction that refers to an unknown conversation or an
/// out-of-range utterance.
pub fn validate_predictions(corpus: &[Conversation], preds: &PredictionDocument) -> ValidationReport {
    let by_id: BTreeMap<&str, &Conversation> = corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut findings = Vec::new();
    for doc in &preds.conversations {
        let mut flag = |message: String| {
            findings.push(Finding {
                conversation_id: doc.conversation_id.clone(),
                message,
            })
        };
        let Some(conv) = by_id.get(doc.conversation_id.as_str()) else {
            flag("unknown conversation id".into());
            continue;
        };
        let in_range = |id: u32| id >= 1 && id as usize <= conv.len();
        for id in doc.emotions.keys() {
            if !in_range(*id) {
                flag(format!("emotion for utterance {id} outside 1..={}", conv.len()));
            }
        }
        for pair in &doc.pairs {
            for id in [pair.emotion_utt_id, pair.cause_utt_id] {
                if !in_range(id) {
                    flag(format!(
                        "pair {:?} references utterance {id} outside 1..={}",
                        pair.to_strings(),
                        conv.len()
                    ));
                }
            }
            if pair.emotion.is_neutral() {
                flag(format!("pair {:?} carries the neutral emotion", pair.to_strings()));
            }
        }
    }
    ValidationReport { findings }
}
