//! Prompt templates, prompt assembly and model-output parsers.
//!
//! Templates are UTF-8 text with `{placeholder}` slots (`{{` and `}}` escape
//! literal braces). The defaults ship in `templates/` and can be overridden
//! from a directory holding files of the same names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Conversation, EmotionLabel, Utterance};
use crate::windowing::ContextWindow;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: {message}")]
    Placeholder { template: TemplateName, message: String },
    #[error("in-context prompts need a demonstration")]
    MissingDemonstration,
    #[error("fine-tuned prompts take no demonstration")]
    UnexpectedDemonstration,
    #[error("utterance {0} is labeled neutral and has no causes to predict")]
    NeutralTarget(u32),
    #[error("no emotion label for utterance {0}")]
    MissingEmotion(u32),
    #[error("utterance {0} not in scope")]
    TargetOutOfScope(u32),
    #[error("no emotion label found in {0:?}")]
    NoLabel(String),
    #[error("broken cause list in {0:?}")]
    Unparseable(String),
    #[error("no valid utterance ids supplied")]
    NoValidIds,
    #[error("template file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    LlamaEmotion,
    LlamaCause,
    GptEmotionIcl,
    GptCauseIcl,
    EmotionExplanation,
    CauseExplanation,
    VideoCaption,
    CaptionStitch,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::LlamaEmotion,
        TemplateName::LlamaCause,
        TemplateName::GptEmotionIcl,
        TemplateName::GptCauseIcl,
        TemplateName::EmotionExplanation,
        TemplateName::CauseExplanation,
        TemplateName::VideoCaption,
        TemplateName::CaptionStitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::LlamaEmotion => "llama_emotion",
            TemplateName::LlamaCause => "llama_cause",
            TemplateName::GptEmotionIcl => "gpt_emotion_icl",
            TemplateName::GptCauseIcl => "gpt_cause_icl",
            TemplateName::EmotionExplanation => "emotion_explanation",
            TemplateName::CauseExplanation => "cause_explanation",
            TemplateName::VideoCaption => "video_caption",
            TemplateName::CaptionStitch => "caption_stitch",
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateName::LlamaEmotion => include_str!("../templates/llama_emotion.txt"),
            TemplateName::LlamaCause => include_str!("../templates/llama_cause.txt"),
            TemplateName::GptEmotionIcl => include_str!("../templates/gpt_emotion_icl.txt"),
            TemplateName::GptCauseIcl => include_str!("../templates/gpt_cause_icl.txt"),
            TemplateName::EmotionExplanation => include_str!("../templates/emotion_explanation.txt"),
            TemplateName::CauseExplanation => include_str!("../templates/cause_explanation.txt"),
            TemplateName::VideoCaption => include_str!("../templates/video_caption.txt"),
            TemplateName::CaptionStitch => include_str!("../templates/caption_stitch.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

/// Placeholder names a template may reference.
pub const PLACEHOLDERS: [&str; 9] = [
    "conversation",
    "window",
    "demonstration",
    "explanation",
    "caption",
    "target_utterance",
    "emotion",
    "speaker_block",
    "causes",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let segments = tokenize(&body).map_err(|message| PromptError::Placeholder {
            template: name,
            message,
        })?;
        for seg in &segments {
            if let Segment::Slot(slot) = seg {
                if !PLACEHOLDERS.contains(&slot.as_str()) {
                    return Err(PromptError::Placeholder {
                        template: name,
                        message: format!("unknown placeholder {{{slot}}}"),
                    });
                }
            }
        }
        Ok(PromptTemplate { name, body, segments })
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholders referenced by the body.
    pub fn slots(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// First 12 hex chars of the body's SHA-256.
    pub fn version(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))[..12].to_string()
    }

    /// Single-pass substitution; every referenced slot must be supplied.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) => {
                    let value = vars.get(name.as_str()).ok_or_else(|| PromptError::Placeholder {
                        template: self.name,
                        message: format!("no value for {{{name}}}"),
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn tokenize(body: &str) -> Result<Vec<Segment>, String> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_lowercase() || ch == '_' => name.push(ch),
                        Some(ch) => return Err(format!("invalid character {ch:?} in placeholder")),
                        None => return Err("unterminated placeholder".into()),
                    }
                }
                if name.is_empty() {
                    return Err("empty placeholder {}".into());
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(name));
            }
            '}' => return Err("unmatched '}' (use '}}' for a literal brace)".into()),
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// The eight templates in use.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|name| {
                let t = PromptTemplate::new(name, name.default_body()).expect("bundled templates are valid");
                (name, t)
            })
            .collect();
        TemplateSet { templates }
    }
}

impl TemplateSet {
    /// Defaults, overridden by `<dir>/<name>.txt` where present.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut set = TemplateSet::default();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                set.templates.insert(name, PromptTemplate::new(name, body)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.templates.insert(template.name, template);
    }

    pub fn versions(&self) -> BTreeMap<TemplateName, String> {
        self.templates.iter().map(|(k, t)| (*k, t.version())).collect()
    }
}

/// Token counting used by the budget guard.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenEstimator for CharHeuristic {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub template: TemplateName,
    pub text: String,
    pub token_estimate: usize,
    /// Context was narrowed to a window by the budget guard.
    pub windowed: bool,
    /// Still above budget after narrowing.
    pub over_budget: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Llama,
    GptIcl,
}

/// A retrieved example and its generated explanation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub text: String,
    pub explanation: String,
}

/// `3. Ross: text`
pub fn utterance_line(u: &Utterance) -> String {
    format!("{}. {}: {}", u.id, u.speaker, u.text)
}

/// Lines for `utterances`, with `[label]` appended when `labels` has an
/// entry. Neutral labels are skipped unless `show_neutral`.
pub fn annotated_block(
    utterances: &[Utterance],
    labels: Option<&BTreeMap<u32, EmotionLabel>>,
    show_neutral: bool,
) -> String {
    utterances
        .iter()
        .map(|u| {
            let mut line = utterance_line(u);
            if let Some(label) = labels.and_then(|l| l.get(&u.id)) {
                if show_neutral || !label.is_neutral() {
                    line.push_str(&format!(" [{label}]"));
                }
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn caption_block(caption: Option<&str>) -> String {
    match caption {
        Some(c) if !c.trim().is_empty() => format!("Video description of the conversation:\n{}\n", c.trim()),
        _ => String::new(),
    }
}

/// Prompt assembly bound to one template set and token estimator.
pub struct PromptBuilder<'a> {
    pub templates: &'a TemplateSet,
    pub estimator: &'a dyn TokenEstimator,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(templates: &'a TemplateSet, estimator: &'a dyn TokenEstimator) -> Self {
        PromptBuilder { templates, estimator }
    }

    fn finish(&self, template: TemplateName, vars: &BTreeMap<&str, String>) -> Result<RenderedPrompt, PromptError> {
        let text = self.templates.get(template).render(vars)?;
        Ok(RenderedPrompt {
            template,
            token_estimate: self.estimator.estimate(&text),
            text,
            windowed: false,
            over_budget: false,
        })
    }

    /// Emotion prompt for one utterance. `scope` restricts the context lines
    /// (the budget guard's fallback); `None` means the whole conversation.
    pub fn emotion_prompt(
        &self,
        conversation: &Conversation,
        target_utt_id: u32,
        mode: PromptMode,
        demonstration: Option<&Demonstration>,
        caption: Option<&str>,
        scope: Option<&ContextWindow>,
    ) -> Result<RenderedPrompt, PromptError> {
        let target = conversation
            .utterance(target_utt_id)
            .ok_or(PromptError::TargetOutOfScope(target_utt_id))?;
        let lines = match scope {
            Some(w) => w.utterances(conversation),
            None => &conversation.utterances[..],
        };
        let mut vars = BTreeMap::new();
        vars.insert("conversation", annotated_block(lines, None, false));
        vars.insert("target_utterance", utterance_line(target));
        let template = match mode {
            PromptMode::Llama => {
                if demonstration.is_some() {
                    return Err(PromptError::UnexpectedDemonstration);
                }
                TemplateName::LlamaEmotion
            }
            PromptMode::GptIcl => {
                let demo = demonstration.ok_or(PromptError::MissingDemonstration)?;
                vars.insert("demonstration", demo.text.clone());
                vars.insert("explanation", demo.explanation.clone());
                vars.insert("caption", caption_block(caption));
                TemplateName::GptEmotionIcl
            }
        };
        self.finish(template, &vars)
    }

    /// Cause prompt for one emotional utterance over `scope` (a window) or
    /// the whole conversation. Emotional lines carry their predicted label.
    #[allow(clippy::too_many_arguments)]
    pub fn cause_prompt(
        &self,
        conversation: &Conversation,
        scope: Option<&ContextWindow>,
        target_utt_id: u32,
        predicted: &BTreeMap<u32, EmotionLabel>,
        mode: PromptMode,
        demonstration: Option<&Demonstration>,
        caption: Option<&str>,
    ) -> Result<RenderedPrompt, PromptError> {
        let lines = match scope {
            Some(w) => w.utterances(conversation),
            None => &conversation.utterances[..],
        };
        let target = lines
            .iter()
            .find(|u| u.id == target_utt_id)
            .ok_or(PromptError::TargetOutOfScope(target_utt_id))?;
        for u in lines {
            if !predicted.contains_key(&u.id) {
                return Err(PromptError::MissingEmotion(u.id));
            }
        }
        let emotion = predicted[&target_utt_id];
        if emotion.is_neutral() {
            return Err(PromptError::NeutralTarget(target_utt_id));
        }
        let block = annotated_block(lines, Some(predicted), false);
        let mut vars = BTreeMap::new();
        vars.insert("target_utterance", utterance_line(target));
        vars.insert("emotion", emotion.to_string());
        let template = match mode {
            PromptMode::Llama => {
                if demonstration.is_some() {
                    return Err(PromptError::UnexpectedDemonstration);
                }
                vars.insert("conversation", block);
                TemplateName::LlamaCause
            }
            PromptMode::GptIcl => {
                let (text, explanation) = match demonstration {
                    Some(d) => (d.text.clone(), d.explanation.clone()),
                    None => ("(no example available)".to_string(), "(none)".to_string()),
                };
                vars.insert("demonstration", text);
                vars.insert("explanation", explanation);
                vars.insert("caption", caption_block(caption));
                vars.insert("window", block);
                TemplateName::GptCauseIcl
            }
        };
        self.finish(template, &vars)
    }

    /// Asks for an explanation of a conversation's gold emotion labels.
    pub fn emotion_explanation_prompt(&self, demo_text: &str) -> Result<RenderedPrompt, PromptError> {
        let vars = BTreeMap::from([("conversation", demo_text.to_string())]);
        self.finish(TemplateName::EmotionExplanation, &vars)
    }

    /// Asks for an explanation of a window's gold causes.
    pub fn cause_explanation_prompt(
        &self,
        window_text: &str,
        target: &Utterance,
        emotion: EmotionLabel,
        causes: &BTreeSet<u32>,
    ) -> Result<RenderedPrompt, PromptError> {
        let vars = BTreeMap::from([
            ("window", window_text.to_string()),
            ("target_utterance", utterance_line(target)),
            ("emotion", emotion.to_string()),
            ("causes", format_id_list(causes)),
        ]);
        self.finish(TemplateName::CauseExplanation, &vars)
    }

    pub fn video_caption_prompt(&self, speaker_text: &str) -> Result<RenderedPrompt, PromptError> {
        let vars = BTreeMap::from([("speaker_block", speaker_text.to_string())]);
        self.finish(TemplateName::VideoCaption, &vars)
    }

    pub fn caption_stitch_prompt(&self, partials: &[String]) -> Result<RenderedPrompt, PromptError> {
        let joined = partials
            .iter()
            .enumerate()
            .map(|(i, p)| format!("Part {}:\n{}", i + 1, p.trim()))
            .collect::<Vec<_>>()
            .join("\n\n");
        let vars = BTreeMap::from([("caption", joined)]);
        self.finish(TemplateName::CaptionStitch, &vars)
    }
}

/// `[2, 4]`
pub fn format_id_list(ids: &BTreeSet<u32>) -> String {
    format!("[{}]", ids.iter().map(u32::to_string).collect::<Vec<_>>().join(", "))
}

/// Returns `prompt` untouched when within budget; otherwise the `fallback`
/// rendering (narrower context), flagged when that is still too long. The
/// estimate never grows.
pub fn guard_token_budget(
    prompt: RenderedPrompt,
    budget: usize,
    fallback: impl FnOnce() -> Result<RenderedPrompt, PromptError>,
) -> RenderedPrompt {
    if prompt.token_estimate <= budget {
        return prompt;
    }
    match fallback() {
        Ok(mut narrowed) if narrowed.token_estimate <= prompt.token_estimate => {
            narrowed.windowed = true;
            narrowed.over_budget = narrowed.token_estimate > budget;
            narrowed
        }
        Ok(_) | Err(_) => RenderedPrompt {
            over_budget: true,
            ..prompt
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEmotion {
    pub label: EmotionLabel,
    pub raw: String,
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(anger|disgust|fear|joy|sadness|surprise|neutral)\b").unwrap())
}

/// First label after the first `::`; the whole text is scanned when there is
/// no `::` or nothing usable follows it.
pub fn parse_emotion(raw: &str) -> Result<ParsedEmotion, PromptError> {
    let first = |s: &str| {
        label_regex()
            .find(s)
            .map(|m| m.as_str().parse::<EmotionLabel>().expect("regex only matches labels"))
    };
    let label = raw
        .split_once("::")
        .and_then(|(_, after)| first(after))
        .or_else(|| first(raw))
        .ok_or_else(|| PromptError::NoLabel(raw.to_string()))?;
    Ok(ParsedEmotion {
        label,
        raw: raw.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCauses {
    pub cause_ids: BTreeSet<u32>,
    pub raw: String,
}

fn list_item_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)^["']?\s*(?:utterance|utt|u)?\s*#?\s*(\d+)\s*["']?$"#).unwrap())
}

fn integer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

/// Ids from the first `[...]` list, or every integer in `raw` when there is
/// no list, kept only if in `valid_ids`. An empty result means "no cause".
pub fn parse_causes(raw: &str, valid_ids: &BTreeSet<u32>) -> Result<ParsedCauses, PromptError> {
    if valid_ids.is_empty() {
        return Err(PromptError::NoValidIds);
    }
    let broken = || PromptError::Unparseable(raw.to_string());
    let candidates: Vec<u64> = match raw.find('[') {
        Some(open) => {
            let rest = &raw[open + 1..];
            let close = rest.find(']').ok_or_else(broken)?;
            let inner = &rest[..close];
            if inner.contains('[') {
                return Err(broken());
            }
            if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner
                    .split(',')
                    .map(|item| {
                        list_item_regex()
                            .captures(item.trim())
                            .and_then(|c| c[1].parse::<u64>().ok())
                            .ok_or_else(broken)
                    })
                    .collect::<Result<_, _>>()?
            }
        }
        None => integer_regex()
            .find_iter(raw)
            .filter_map(|m| m.as_str().parse::<u64>().ok())
            .collect(),
    };
    let mut cause_ids = BTreeSet::new();
    for id in candidates {
        match u32::try_from(id).ok().filter(|id| valid_ids.contains(id)) {
            Some(id) => {
                cause_ids.insert(id);
            }
            None => log::debug!("dropping cause id {id} outside the valid range"),
        }
    }
    Ok(ParsedCauses {
        cause_ids,
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(range: std::ops::RangeInclusive<u32>) -> BTreeSet<u32> {
        range.collect()
    }

    #[test]
    fn template_substitution_and_escapes() {
        let t = PromptTemplate::new(TemplateName::CaptionStitch, "a {caption} {{literal}} b").unwrap();
        let out = t.render(&BTreeMap::from([("caption", "X".to_string())])).unwrap();
        assert_eq!(out, "a X {literal} b");
        assert!(t.render(&BTreeMap::new()).is_err());
    }

    #[test]
    fn template_rejects_bad_placeholders() {
        assert!(PromptTemplate::new(TemplateName::CaptionStitch, "{nope}").is_err());
        assert!(PromptTemplate::new(TemplateName::CaptionStitch, "{caption").is_err());
        assert!(PromptTemplate::new(TemplateName::CaptionStitch, "x } y").is_err());
        assert!(PromptTemplate::new(TemplateName::CaptionStitch, "{Caption}").is_err());
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let t = PromptTemplate::new(TemplateName::CaptionStitch, "{caption}").unwrap();
        let out = t
            .render(&BTreeMap::from([("caption", "{emotion}".to_string())]))
            .unwrap();
        assert_eq!(out, "{emotion}");
    }

    #[test]
    fn bundled_templates_load() {
        let set = TemplateSet::default();
        assert_eq!(set.versions().len(), 8);
        assert!(set.get(TemplateName::GptEmotionIcl).slots().contains("demonstration"));
    }

    #[test]
    fn emotion_parsing() {
        assert_eq!(parse_emotion("Emotion :: joy").unwrap().label, EmotionLabel::Joy);
        assert_eq!(
            parse_emotion("the answer is:: Surprise!").unwrap().label,
            EmotionLabel::Surprise
        );
        assert_eq!(parse_emotion("anger :: fear").unwrap().label, EmotionLabel::Fear);
        assert_eq!(
            parse_emotion("I think it is sadness").unwrap().label,
            EmotionLabel::Sadness
        );
        assert_eq!(
            parse_emotion("joyful :: nothing").unwrap_err(),
            PromptError::NoLabel("joyful :: nothing".into())
        );
        assert!(matches!(
            parse_emotion("I cannot determine this"),
            Err(PromptError::NoLabel(_))
        ));
    }

    #[test]
    fn cause_parsing() {
        assert_eq!(
            parse_causes("[2, 4]", &ids(1..=5)).unwrap().cause_ids,
            BTreeSet::from([2, 4])
        );
        assert_eq!(
            parse_causes("causes: [2, 9]", &ids(1..=5)).unwrap().cause_ids,
            BTreeSet::from([2])
        );
        assert!(parse_causes("none", &ids(1..=5)).unwrap().cause_ids.is_empty());
        assert!(parse_causes("[]", &ids(1..=5)).unwrap().cause_ids.is_empty());
        assert_eq!(
            parse_causes("['1', \"3\"]", &ids(1..=5)).unwrap().cause_ids,
            BTreeSet::from([1, 3])
        );
        assert_eq!(
            parse_causes("[utterance 2, u3]", &ids(1..=5)).unwrap().cause_ids,
            BTreeSet::from([2, 3])
        );
        assert_eq!(
            parse_causes("utterances 1 and 3", &ids(1..=5)).unwrap().cause_ids,
            BTreeSet::from([1, 3])
        );
        assert!(matches!(
            parse_causes("[2, 4", &ids(1..=5)),
            Err(PromptError::Unparseable(_))
        ));
        assert!(matches!(
            parse_causes("[two]", &ids(1..=5)),
            Err(PromptError::Unparseable(_))
        ));
        assert!(matches!(
            parse_causes("[1]", &BTreeSet::new()),
            Err(PromptError::NoValidIds)
        ));
        assert!(parse_causes("[99999999999999]", &ids(1..=5))
            .unwrap()
            .cause_ids
            .is_empty());
    }

    #[test]
    fn char_heuristic_rounds_up() {
        assert_eq!(CharHeuristic.estimate(""), 0);
        assert_eq!(CharHeuristic.estimate("abcd"), 1);
        assert_eq!(CharHeuristic.estimate("abcde"), 2);
    }

    fn prompt(tokens: usize) -> RenderedPrompt {
        RenderedPrompt {
            template: TemplateName::LlamaEmotion,
            text: "x".repeat(tokens * 4),
            token_estimate: tokens,
            windowed: false,
            over_budget: false,
        }
    }

    #[test]
    fn budget_guard() {
        let out = guard_token_budget(prompt(1500), 4096, || panic!("fallback must not run"));
        assert_eq!(out.token_estimate, 1500);
        assert!(!out.windowed);

        let out = guard_token_budget(prompt(5000), 4096, || Ok(prompt(800)));
        assert!(out.windowed && !out.over_budget);
        assert_eq!(out.token_estimate, 800);

        let out = guard_token_budget(prompt(5000), 4096, || Ok(prompt(4500)));
        assert!(out.windowed && out.over_budget);

        let out = guard_token_budget(prompt(5000), 4096, || Ok(prompt(6000)));
        assert_eq!(out.token_estimate, 5000);
        assert!(out.over_budget && !out.windowed);
    }
}
