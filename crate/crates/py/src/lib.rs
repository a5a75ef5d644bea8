//! Python bindings for the deterministic parts of `eca_core`: corpus
//! loading and statistics, windowing, output parsing, frame sampling,
//! self-cause post-processing and scoring.
//!
//! Pairs cross the boundary as `(emotion_utt_id, emotion, cause_utt_id)`
//! tuples; emotions are lowercase label strings.

use std::collections::{BTreeMap, BTreeSet};

use eca_core::corpus::{self, CorpusFormat};
use eca_core::evaluation::{self, PairSets};
use eca_core::{EmotionCausePair, EmotionLabel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type PairTuple = (u32, String, u32);

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn label(s: &str) -> PyResult<EmotionLabel> {
    s.parse().map_err(value_error)
}

fn pair(t: &PairTuple) -> PyResult<EmotionCausePair> {
    EmotionCausePair::new(t.0, label(&t.1)?, t.2)
        .ok_or_else(|| value_error(format!("pair {t:?} carries the neutral emotion")))
}

fn tuple(p: &EmotionCausePair) -> PairTuple {
    (p.emotion_utt_id, p.emotion.to_string(), p.cause_utt_id)
}

fn pair_sets(raw: BTreeMap<String, Vec<PairTuple>>) -> PyResult<PairSets> {
    raw.into_iter()
        .map(|(id, pairs)| Ok((id, pairs.iter().map(pair).collect::<PyResult<BTreeSet<_>>>()?)))
        .collect()
}

/// One conversation of a corpus file.
#[pyclass(module = "eca_py", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Conversation {
    pub id: String,
    /// `(utterance_id, speaker, text, emotion or None)`
    pub utterances: Vec<(u32, String, String, Option<String>)>,
    pub pairs: Vec<PairTuple>,
}

#[pymethods]
impl Conversation {
    fn __len__(&self) -> usize {
        self.utterances.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Conversation(id={:?}, utterances={}, pairs={})",
            self.id,
            self.utterances.len(),
            self.pairs.len()
        )
    }
}

impl From<&corpus::Conversation> for Conversation {
    fn from(c: &corpus::Conversation) -> Self {
        Conversation {
            id: c.id.clone(),
            utterances: c
                .utterances
                .iter()
                .map(|u| {
                    (
                        u.id,
                        u.speaker.clone(),
                        u.text.clone(),
                        u.gold_emotion.map(|l| l.to_string()),
                    )
                })
                .collect(),
            pairs: c.gold_pairs.iter().map(tuple).collect(),
        }
    }
}

fn read_corpus(path: &str) -> PyResult<Vec<corpus::Conversation>> {
    corpus::load_corpus(path, CorpusFormat::NativeJson).map_err(|e| match e {
        corpus::CorpusError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_error(other),
    })
}

/// Loads a corpus file in the native JSON layout.
#[pyfunction]
pub fn load_corpus(path: &str) -> PyResult<Vec<Conversation>> {
    Ok(read_corpus(path)?.iter().map(Conversation::from).collect())
}

/// Dataset statistics of a gold-annotated corpus file, with the derived
/// cause-position fractions.
#[pyfunction]
pub fn dataset_stats(py: Python<'_>, path: &str) -> PyResult<Py<pyo3::types::PyDict>> {
    let stats = corpus::compute_stats(&read_corpus(path)?).map_err(value_error)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("n_conversations", stats.n_conversations)?;
    d.set_item("n_utterances", stats.n_utterances)?;
    d.set_item("n_emotional", stats.n_emotional)?;
    d.set_item("n_self_causal", stats.n_self_causal)?;
    d.set_item("n_non_self_causal", stats.n_non_self_causal)?;
    d.set_item("n_no_cause_emotional", stats.n_no_cause_emotional)?;
    d.set_item("n_later_causal", stats.n_later_causal)?;
    d.set_item("n_pairs", stats.n_pairs)?;
    let histogram: BTreeMap<String, usize> = stats
        .emotion_histogram
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    d.set_item("emotion_histogram", histogram)?;
    d.set_item("relative_position_histogram", stats.relative_position_histogram.clone())?;
    d.set_item("self_cause_fraction", stats.self_cause_fraction())?;
    d.set_item("later_cause_fraction", stats.later_cause_fraction())?;
    d.set_item("recent_cause_fraction", stats.recent_cause_fraction())?;
    Ok(d.unbind())
}

/// `(first, last, position)` of the context window around `target`.
#[pyfunction]
pub fn window_bounds(target: u32, length: usize) -> PyResult<(u32, u32, String)> {
    let (first, last, position) = eca_core::windowing::window_bounds(target, length).map_err(value_error)?;
    Ok((first, last, position.to_string()))
}

/// The label after the last `::` in a model answer.
#[pyfunction]
pub fn parse_emotion(raw: &str) -> PyResult<String> {
    eca_core::prompting::parse_emotion(raw)
        .map(|p| p.label.to_string())
        .map_err(value_error)
}

/// Cause ids named by a model answer, restricted to `valid_ids`.
#[pyfunction]
pub fn parse_causes(raw: &str, valid_ids: BTreeSet<u32>) -> PyResult<Vec<u32>> {
    eca_core::prompting::parse_causes(raw, &valid_ids)
        .map(|p| p.cause_ids.into_iter().collect())
        .map_err(value_error)
}

/// The nine frame indices sampled from a clip of `frame_count` frames.
#[pyfunction]
pub fn sample_frames(frame_count: usize) -> Vec<usize> {
    eca_core::montage::sample_frames(frame_count).to_vec()
}

/// Adds `(j, e_j, j)` for every non-neutral utterance `j`.
#[pyfunction]
pub fn add_self_causes(pairs: Vec<PairTuple>, emotions: BTreeMap<u32, String>) -> PyResult<Vec<PairTuple>> {
    let pairs = pairs.iter().map(pair).collect::<PyResult<BTreeSet<_>>>()?;
    let emotions = emotions
        .iter()
        .map(|(k, v)| Ok((*k, label(v)?)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    Ok(eca_core::pipeline::add_self_causes(&pairs, &emotions)
        .iter()
        .map(tuple)
        .collect())
}

/// Exact-triple pair scores. Both arguments map conversation ids to pair
/// lists and must cover the same conversations.
#[pyfunction]
pub fn score_pairs(
    py: Python<'_>,
    gold: BTreeMap<String, Vec<PairTuple>>,
    pred: BTreeMap<String, Vec<PairTuple>>,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let eval = evaluation::score_pairs(&pair_sets(gold)?, &pair_sets(pred)?).map_err(value_error)?;
    let d = pyo3::types::PyDict::new(py);
    let m = eval.micro;
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("fn", m.fn_)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    let b = &eval.breakdown;
    d.set_item("weighted_precision", b.weighted_precision)?;
    d.set_item("weighted_recall", b.weighted_recall)?;
    d.set_item("weighted_f1", b.weighted_f1)?;
    let per_label: BTreeMap<String, (f64, f64, f64, usize)> = b
        .per_label
        .iter()
        .map(|(l, s)| {
            (
                l.to_string(),
                (s.score.precision, s.score.recall, s.score.f1, s.support),
            )
        })
        .collect();
    d.set_item("per_label", per_label)?;
    Ok(d.unbind())
}

/// Scores a prediction file against a gold corpus file and renders the
/// report as `json`, `csv` or `markdown`.
#[pyfunction]
#[pyo3(signature = (gold_path, pred_path, format = "json"))]
pub fn evaluate_files(gold_path: &str, pred_path: &str, format: &str) -> PyResult<String> {
    let gold = read_corpus(gold_path)?;
    let text = std::fs::read_to_string(pred_path).map_err(|e| PyIOError::new_err(format!("{pred_path}: {e}")))?;
    let doc = eca_core::PredictionDocument::from_json(&text).map_err(value_error)?;
    let pairs = evaluation::score_pairs(
        &evaluation::gold_pair_sets(&gold),
        &evaluation::predicted_pair_sets(&doc),
    )
    .map_err(value_error)?;
    let (g, p) = evaluation::emotion_maps(&gold, &doc).map_err(value_error)?;
    let matrix = evaluation::confusion(&g, &p).map_err(value_error)?;
    let report = evaluation::EvaluationReport::new(pairs, Some(matrix), corpus::compute_stats(&gold).ok());
    Ok(evaluation::emit_report(&report, format.parse().map_err(value_error)?))
}

#[pymodule]
pub fn eca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Conversation>()?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(window_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(parse_emotion, m)?)?;
    m.add_function(wrap_pyfunction!(parse_causes, m)?)?;
    m.add_function(wrap_pyfunction!(sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(add_self_causes, m)?)?;
    m.add_function(wrap_pyfunction!(score_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add(
        "LABELS",
        EmotionLabel::ALL.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
