//! Pair-level precision/recall/F1, per-emotion breakdowns and emotion
//! confusion matrices.
//!
//! A predicted pair counts as correct only when the identical
//! `(emotion utterance, emotion, cause utterance)` triple is in the gold set
//! of the same conversation. Every ratio with a zero denominator is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Conversation, DatasetStats, EmotionCausePair, EmotionLabel};
use crate::pipeline::PredictionDocument;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const METRIC_DEFINITION: &str = "pairs match on the exact (emotion utterance, emotion, cause utterance) triple \
within a conversation; micro scores pool all conversations; weighted scores average per-emotion scores by gold pair \
support over the six non-neutral emotions";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("conversation ids differ: only in gold {only_gold:?}, only in predictions {only_pred:?}")]
    ConversationMismatch {
        only_gold: Vec<String>,
        only_pred: Vec<String>,
    },
    #[error("utterance keys differ between gold and predicted emotions ({gold} vs {pred} keys)")]
    KeyMismatch { gold: usize, pred: usize },
    #[error("conversation {conversation}: utterance {utterance} lacks a gold emotion")]
    MissingGold { conversation: String, utterance: u32 },
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PairScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PairScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PairScore {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelScore {
    #[serde(flatten)]
    pub score: PairScore,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmotionBreakdown {
    pub per_label: BTreeMap<EmotionLabel, LabelScore>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl EmotionBreakdown {
    fn from_scores(per_label: BTreeMap<EmotionLabel, LabelScore>) -> Self {
        let total: usize = per_label.values().map(|s| s.support).sum();
        let weighted = |f: fn(&PairScore) -> f64| {
            if total == 0 {
                return 0.0;
            }
            per_label.values().map(|s| f(&s.score) * s.support as f64).sum::<f64>() / total as f64
        };
        EmotionBreakdown {
            weighted_precision: weighted(|s| s.precision),
            weighted_recall: weighted(|s| s.recall),
            weighted_f1: weighted(|s| s.f1),
            per_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEvaluation {
    pub micro: PairScore,
    pub breakdown: EmotionBreakdown,
}

pub type PairSets = BTreeMap<String, BTreeSet<EmotionCausePair>>;

pub fn gold_pair_sets(corpus: &[Conversation]) -> PairSets {
    corpus.iter().map(|c| (c.id.clone(), c.gold_pairs.clone())).collect()
}

pub fn predicted_pair_sets(doc: &PredictionDocument) -> PairSets {
    doc.conversations
        .iter()
        .map(|c| (c.conversation_id.clone(), c.pairs.clone()))
        .collect()
}

pub fn score_pairs(gold: &PairSets, pred: &PairSets) -> Result<PairEvaluation, EvalError> {
    let only_gold: Vec<String> = gold.keys().filter(|k| !pred.contains_key(*k)).cloned().collect();
    let only_pred: Vec<String> = pred.keys().filter(|k| !gold.contains_key(*k)).cloned().collect();
    if !only_gold.is_empty() || !only_pred.is_empty() {
        return Err(EvalError::ConversationMismatch { only_gold, only_pred });
    }

    // (tp, fp, fn) per label, six emotional labels only.
    let mut counts: BTreeMap<EmotionLabel, (usize, usize, usize)> =
        EmotionLabel::EMOTIONAL.iter().map(|l| (*l, (0, 0, 0))).collect();
    for (conv, gold_set) in gold {
        let pred_set = &pred[conv];
        for p in pred_set {
            let entry = counts.entry(p.emotion).or_default();
            if gold_set.contains(p) {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        for g in gold_set.difference(pred_set) {
            counts.entry(g.emotion).or_default().2 += 1;
        }
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    let per_label = counts
        .into_iter()
        .map(|(label, (tp, fp, fn_))| {
            (
                label,
                LabelScore {
                    score: PairScore::from_counts(tp, fp, fn_),
                    support: tp + fn_,
                },
            )
        })
        .collect();
    Ok(PairEvaluation {
        micro: PairScore::from_counts(tp, fp, fn_),
        breakdown: EmotionBreakdown::from_scores(per_label),
    })
}

/// Rows are gold labels, columns predicted labels, in
/// [`EmotionLabel::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: [EmotionLabel; 7],
    pub cells: [[usize; 7]; 7],
    pub per_class: BTreeMap<EmotionLabel, LabelScore>,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

impl ConfusionMatrix {
    pub fn cell(&self, gold: EmotionLabel, pred: EmotionLabel) -> usize {
        self.cells[gold.index()][pred.index()]
    }

    pub fn total(&self) -> usize {
        self.cells.iter().flatten().sum()
    }

    pub fn row_sum(&self, gold: EmotionLabel) -> usize {
        self.cells[gold.index()].iter().sum()
    }
}

pub fn confusion<K: Ord>(
    gold: &BTreeMap<K, EmotionLabel>,
    pred: &BTreeMap<K, EmotionLabel>,
) -> Result<ConfusionMatrix, EvalError> {
    if gold.len() != pred.len() || gold.keys().any(|k| !pred.contains_key(k)) {
        return Err(EvalError::KeyMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut cells = [[0usize; 7]; 7];
    for (k, g) in gold {
        cells[g.index()][pred[k].index()] += 1;
    }
    let per_class: BTreeMap<EmotionLabel, LabelScore> = EmotionLabel::ALL
        .iter()
        .map(|l| {
            let i = l.index();
            let tp = cells[i][i];
            let row: usize = cells[i].iter().sum();
            let col: usize = cells.iter().map(|r| r[i]).sum();
            (
                *l,
                LabelScore {
                    score: PairScore::from_counts(tp, col - tp, row - tp),
                    support: row,
                },
            )
        })
        .collect();
    let total = gold.len();
    let correct: usize = (0..7).map(|i| cells[i][i]).sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.values().map(|s| s.score.f1 * s.support as f64).sum::<f64>() / total as f64
    };
    Ok(ConfusionMatrix {
        labels: EmotionLabel::ALL,
        cells,
        per_class,
        weighted_f1,
        accuracy: ratio(correct, total),
    })
}

pub type UtteranceEmotions = BTreeMap<(String, u32), EmotionLabel>;

/// Gold and predicted emotions keyed by `(conversation, utterance)`, over
/// the conversations present in both. Utterances missing a prediction count
/// as neutral.
pub fn emotion_maps(
    corpus: &[Conversation],
    doc: &PredictionDocument,
) -> Result<(UtteranceEmotions, UtteranceEmotions), EvalError> {
    let mut gold = BTreeMap::new();
    let mut pred = BTreeMap::new();
    for conv in corpus {
        let Some(p) = doc.get(&conv.id) else { continue };
        for u in &conv.utterances {
            let g = u.gold_emotion.ok_or_else(|| EvalError::MissingGold {
                conversation: conv.id.clone(),
                utterance: u.id,
            })?;
            gold.insert((conv.id.clone(), u.id), g);
            pred.insert(
                (conv.id.clone(), u.id),
                p.emotions.get(&u.id).copied().unwrap_or(EmotionLabel::Neutral),
            );
        }
    }
    Ok((gold, pred))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub metric: &'static str,
    pub pairs: PairEvaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_confusion: Option<ConfusionMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<DatasetStats>,
}

impl EvaluationReport {
    pub fn new(pairs: PairEvaluation, emotion_confusion: Option<ConfusionMatrix>, stats: Option<DatasetStats>) -> Self {
        EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metric: METRIC_DEFINITION,
            pairs,
            emotion_confusion,
            stats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_string_pretty(report).expect("report serializes");
            out.push('\n');
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("label,precision,recall,f1,support,tp,fp,fn\n");
            for (label, s) in &report.pairs.breakdown.per_label {
                let p = s.score;
                let _ = writeln!(
                    out,
                    "{label},{:.4},{:.4},{:.4},{},{},{},{}",
                    p.precision, p.recall, p.f1, s.support, p.tp, p.fp, p.fn_
                );
            }
            let m = report.pairs.micro;
            let _ = writeln!(
                out,
                "micro,{:.4},{:.4},{:.4},{},{},{},{}",
                m.precision,
                m.recall,
                m.f1,
                m.tp + m.fn_,
                m.tp,
                m.fp,
                m.fn_
            );
            let b = &report.pairs.breakdown;
            let _ = writeln!(
                out,
                "weighted,{:.4},{:.4},{:.4},{},,,",
                b.weighted_precision,
                b.weighted_recall,
                b.weighted_f1,
                m.tp + m.fn_
            );
            out
        }
        ReportFormat::Markdown => markdown(report),
    }
}

fn markdown(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Emotion-cause pair evaluation\n");
    let _ = writeln!(out, "Matching: {}.\n", report.metric);
    let m = report.pairs.micro;
    let b = &report.pairs.breakdown;
    let _ = writeln!(out, "| | P | R | F1 |\n|---|---|---|---|");
    let _ = writeln!(out, "| micro | {:.4} | {:.4} | {:.4} |", m.precision, m.recall, m.f1);
    let _ = writeln!(
        out,
        "| weighted | {:.4} | {:.4} | {:.4} |\n",
        b.weighted_precision, b.weighted_recall, b.weighted_f1
    );
    let _ = writeln!(out, "## Pairs by emotion\n");
    let _ = writeln!(out, "| Emotion | P | R | F1 | Support |\n|---|---|---|---|---|");
    for (label, s) in &b.per_label {
        let _ = writeln!(
            out,
            "| {label} | {:.4} | {:.4} | {:.4} | {} |",
            s.score.precision, s.score.recall, s.score.f1, s.support
        );
    }
    if let Some(cm) = &report.emotion_confusion {
        let _ = writeln!(out, "\n## Emotion recognition\n");
        let _ = writeln!(out, "| Emotion | P | R | F1 | Support |\n|---|---|---|---|---|");
        for (label, s) in &cm.per_class {
            let _ = writeln!(
                out,
                "| {label} | {:.4} | {:.4} | {:.4} | {} |",
                s.score.precision, s.score.recall, s.score.f1, s.support
            );
        }
        let _ = writeln!(
            out,
            "\nAccuracy {:.4}, weighted F1 {:.4}\n",
            cm.accuracy, cm.weighted_f1
        );
        let _ = writeln!(out, "### Confusion matrix (rows gold, columns predicted)\n");
        let header: Vec<&str> = cm.labels.iter().map(|l| l.as_str()).collect();
        let _ = writeln!(out, "| | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(7));
        for (i, label) in cm.labels.iter().enumerate() {
            let row: Vec<String> = cm.cells[i].iter().map(usize::to_string).collect();
            let _ = writeln!(out, "| {label} | {} |", row.join(" | "));
        }
    }
    if let Some(stats) = &report.stats {
        let _ = writeln!(
            out,
            "\nGold corpus: {} conversations, {} utterances, {} emotional, {} pairs.",
            stats.n_conversations, stats.n_utterances, stats.n_emotional, stats.n_pairs
        );
    }
    out
}

/// Where one conversation's predictions disagree with gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversationErrors {
    pub conversation_id: String,
    /// `(utterance, gold, predicted)`.
    pub emotion_errors: Vec<(u32, EmotionLabel, EmotionLabel)>,
    /// Pairs in corpus string form, `["3_joy", "2"]`.
    pub missed_pairs: Vec<[String; 2]>,
    pub spurious_pairs: Vec<[String; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ErrorAnalysis {
    pub emotion_errors: usize,
    pub missed_pairs: usize,
    pub spurious_pairs: usize,
    /// Spurious pairs whose emotion utterance is gold-neutral.
    pub spurious_on_neutral: usize,
    /// Missed pairs whose emotion utterance was predicted neutral.
    pub missed_after_neutral: usize,
    /// `(gold, predicted)` → count, errors only.
    pub confusions: BTreeMap<String, usize>,
    pub conversations: Vec<ConversationErrors>,
}

/// Lists every wrong emotion and every missed or spurious pair, and counts
/// how many pair errors trace back to an emotion error.
pub fn analyze_errors(corpus: &[Conversation], doc: &PredictionDocument) -> Result<ErrorAnalysis, EvalError> {
    let gold_sets = gold_pair_sets(corpus);
    let pred_sets = predicted_pair_sets(doc);
    // Same id check as scoring.
    score_pairs(&gold_sets, &pred_sets)?;
    let (gold_emotions, pred_emotions) = emotion_maps(corpus, doc)?;

    let mut out = ErrorAnalysis::default();
    for conv in corpus {
        let key = |u: u32| (conv.id.clone(), u);
        let missed: Vec<&EmotionCausePair> = gold_sets[&conv.id].difference(&pred_sets[&conv.id]).collect();
        let spurious: Vec<&EmotionCausePair> = pred_sets[&conv.id].difference(&gold_sets[&conv.id]).collect();
        let mut errors = ConversationErrors {
            conversation_id: conv.id.clone(),
            emotion_errors: Vec::new(),
            missed_pairs: missed.iter().map(|p| p.to_strings()).collect(),
            spurious_pairs: spurious.iter().map(|p| p.to_strings()).collect(),
        };
        for u in &conv.utterances {
            let (g, p) = (gold_emotions[&key(u.id)], pred_emotions[&key(u.id)]);
            if g != p {
                errors.emotion_errors.push((u.id, g, p));
                *out.confusions.entry(format!("{g}->{p}")).or_default() += 1;
            }
        }
        out.spurious_on_neutral += spurious
            .iter()
            .filter(|pair| gold_emotions[&key(pair.emotion_utt_id)].is_neutral())
            .count();
        out.missed_after_neutral += missed
            .iter()
            .filter(|pair| pred_emotions[&key(pair.emotion_utt_id)].is_neutral())
            .count();
        out.emotion_errors += errors.emotion_errors.len();
        out.missed_pairs += errors.missed_pairs.len();
        out.spurious_pairs += errors.spurious_pairs.len();
        if !(errors.emotion_errors.is_empty() && errors.missed_pairs.is_empty() && errors.spurious_pairs.is_empty()) {
            out.conversations.push(errors);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    fn pair(e: u32, l: EmotionLabel, c: u32) -> EmotionCausePair {
        EmotionCausePair::new(e, l, c).unwrap()
    }

    fn sets(pairs: &[EmotionCausePair]) -> PairSets {
        BTreeMap::from([("c".to_string(), pairs.iter().copied().collect())])
    }

    #[test]
    fn worked_example() {
        let gold = sets(&[pair(3, Joy, 2), pair(3, Joy, 3)]);
        let pred = sets(&[pair(3, Joy, 3), pair(5, Anger, 5)]);
        let eval = score_pairs(&gold, &pred).unwrap();
        assert_eq!((eval.micro.tp, eval.micro.fp, eval.micro.fn_), (1, 1, 1));
        assert_eq!(eval.micro.precision, 0.5);
        assert_eq!(eval.micro.recall, 0.5);
        assert_eq!(eval.micro.f1, 0.5);
        // Only joy has gold support.
        assert_eq!(eval.breakdown.weighted_f1, eval.breakdown.per_label[&Joy].score.f1);
    }

    #[test]
    fn degenerate_scores_are_zero() {
        let eval = score_pairs(&sets(&[pair(1, Joy, 1)]), &sets(&[])).unwrap();
        assert_eq!(
            (eval.micro.precision, eval.micro.recall, eval.micro.f1),
            (0.0, 0.0, 0.0)
        );
        let eval = score_pairs(&sets(&[]), &sets(&[])).unwrap();
        assert_eq!(eval.micro.f1, 0.0);
        assert_eq!(eval.breakdown.weighted_f1, 0.0);
    }

    #[test]
    fn perfect_match() {
        let g = sets(&[pair(1, Joy, 1), pair(2, Sadness, 1)]);
        let eval = score_pairs(&g, &g).unwrap();
        assert_eq!(eval.micro.f1, 1.0);
        assert_eq!(eval.breakdown.weighted_f1, 1.0);
    }

    #[test]
    fn mismatched_conversations() {
        let mut pred = sets(&[]);
        pred.insert("other".into(), BTreeSet::new());
        assert!(matches!(
            score_pairs(&sets(&[]), &pred),
            Err(EvalError::ConversationMismatch { .. })
        ));
    }

    #[test]
    fn toy_confusion() {
        let gold = BTreeMap::from([(1, Neutral), (2, Joy), (3, Anger)]);
        let pred = BTreeMap::from([(1, Neutral), (2, Anger), (3, Anger)]);
        let cm = confusion(&gold, &pred).unwrap();
        assert_eq!(cm.cell(Neutral, Neutral), 1);
        assert_eq!(cm.cell(Joy, Anger), 1);
        assert_eq!(cm.cell(Anger, Anger), 1);
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.per_class[&Anger].score.precision, 0.5);
        assert_eq!(cm.per_class[&Joy].score.recall, 0.0);
    }

    #[test]
    fn all_joy_predictions() {
        let gold = BTreeMap::from([(1, Neutral), (2, Joy), (3, Anger), (4, Joy)]);
        let pred: BTreeMap<_, _> = gold.keys().map(|k| (*k, Joy)).collect();
        let cm = confusion(&gold, &pred).unwrap();
        assert_eq!(cm.cells.iter().map(|r| r[Joy.index()]).sum::<usize>(), 4);
        assert_eq!(cm.per_class[&Joy].score.recall, 1.0);
        assert_eq!(cm.per_class[&Anger].score.recall, 0.0);
        assert_eq!(cm.per_class[&Neutral].score.recall, 0.0);
    }

    #[test]
    fn confusion_key_mismatch() {
        let gold = BTreeMap::from([(1, Neutral)]);
        let pred = BTreeMap::from([(2, Neutral)]);
        assert!(matches!(confusion(&gold, &pred), Err(EvalError::KeyMismatch { .. })));
    }

    #[test]
    fn csv_shape() {
        let g = sets(&[pair(1, Joy, 1)]);
        let report = EvaluationReport::new(score_pairs(&g, &g).unwrap(), None, None);
        let csv = emit_report(&report, ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 6 + 2);
        assert!(lines[7].starts_with("micro,1.0000"));
        assert!(lines[8].starts_with("weighted,1.0000"));
    }
}
