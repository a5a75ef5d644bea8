//! Two-step prediction: emotions for every utterance, then causes for every
//! utterance predicted as emotional, then optional self-cause completion.
//!
//! `finetuned_chat` sends per-utterance prompts with the whole conversation
//! as context to a chat model fine-tuned for each step. `icl` retrieves
//! annotated training examples by embedding distance, has them explained by
//! a chat model, and uses them as demonstrations; causes are predicted
//! inside a context window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, EmotionCausePair, EmotionLabel};
use crate::gateway::{
    complete_with_retry, run_throttled, Backend, ChatMessage, ModelRequest, ModelResponse, RetryPolicy, ThrottleLimits,
};
use crate::montage::CaptionCache;
use crate::prompting::{
    annotated_block, format_id_list, guard_token_budget, parse_causes, parse_emotion, utterance_line, Demonstration,
    PromptBuilder, PromptMode, RenderedPrompt, TemplateName,
};
use crate::retrieval::{Embedder, GatewayEmbedder, IndexKey, RetrievalError, VectorIndex};
use crate::windowing::extract_window;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("conversation {conversation}: {message}")]
    Conversation { conversation: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    #[serde(alias = "finetuned")]
    FinetunedChat,
    Icl,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::FinetunedChat => "finetuned_chat",
            Approach::Icl => "icl",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub approach: Approach,
    pub use_video_captions: bool,
    pub add_self_causes: bool,
    /// Feed gold instead of predicted emotions to the cause step.
    pub use_gold_emotions: bool,
    pub retry: RetryPolicy,
    /// Prompts estimated above this fall back to a context window.
    pub token_budget: usize,
    pub emotion_model: String,
    pub cause_model: String,
    pub explanation_model: String,
    pub embedding_model: String,
    pub system_prompt: Option<String>,
    /// Demonstrations retrieved per prompt.
    pub demonstrations: usize,
    pub max_concurrent_conversations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            approach: Approach::FinetunedChat,
            use_video_captions: false,
            add_self_causes: true,
            use_gold_emotions: false,
            retry: RetryPolicy::default(),
            token_budget: 4096,
            emotion_model: "llama-2-13b-chat-emotion".into(),
            cause_model: "llama-2-13b-chat-cause".into(),
            explanation_model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-ada-002".into(),
            system_prompt: None,
            demonstrations: 1,
            max_concurrent_conversations: 1,
        }
    }
}

impl PipelineConfig {
    /// Defaults for the in-context approach (GPT-3.5 for both steps).
    pub fn icl() -> Self {
        PipelineConfig {
            approach: Approach::Icl,
            use_video_captions: true,
            emotion_model: "gpt-3.5-turbo".into(),
            cause_model: "gpt-3.5-turbo".into(),
            ..PipelineConfig::default()
        }
    }

    pub fn mode(&self) -> PromptMode {
        match self.approach {
            Approach::FinetunedChat => PromptMode::Llama,
            Approach::Icl => PromptMode::GptIcl,
        }
    }

    fn templates_used(&self) -> &'static [TemplateName] {
        match self.approach {
            Approach::FinetunedChat => &[TemplateName::LlamaEmotion, TemplateName::LlamaCause],
            Approach::Icl => &[
                TemplateName::GptEmotionIcl,
                TemplateName::GptCauseIcl,
                TemplateName::EmotionExplanation,
                TemplateName::CauseExplanation,
            ],
        }
    }
}

/// Training data and indices needed by the in-context approach.
pub struct IclResources {
    pub train: BTreeMap<String, Conversation>,
    pub conversation_index: VectorIndex,
    pub cause_indices: BTreeMap<IndexKey, VectorIndex>,
}

impl IclResources {
    pub fn new(
        train: Vec<Conversation>,
        conversation_index: VectorIndex,
        cause_indices: BTreeMap<IndexKey, VectorIndex>,
    ) -> Result<Self, PipelineError> {
        if conversation_index.is_empty() {
            return Err(PipelineError::Config("conversation index is empty".into()));
        }
        let missing: Vec<String> = IndexKey::all()
            .filter(|k| !cause_indices.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::Config(format!(
                "missing cause indices: {}",
                missing.join(", ")
            )));
        }
        Ok(IclResources {
            train: train.into_iter().map(|c| (c.id.clone(), c)).collect(),
            conversation_index,
            cause_indices,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Embedding,
    EmotionExplanation,
    Emotion,
    CauseExplanation,
    Cause,
}

/// One backend call as issued by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub conversation_id: String,
    pub step: Step,
    pub utterance_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub conversation_id: String,
    pub utterance_id: Option<u32>,
    pub step: Step,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub approach: Approach,
    pub add_self_causes: bool,
    pub use_video_captions: bool,
    #[serde(default)]
    pub use_gold_emotions: bool,
    pub templates: BTreeMap<TemplateName, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationPrediction {
    pub conversation_id: String,
    pub emotions: BTreeMap<u32, EmotionLabel>,
    pub pairs: BTreeSet<EmotionCausePair>,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionDocument {
    pub conversations: Vec<ConversationPrediction>,
}

#[derive(Serialize, Deserialize)]
struct RawPrediction {
    #[serde(rename = "conversation_ID")]
    conversation_id: serde_json::Value,
    #[serde(default)]
    emotions: BTreeMap<u32, String>,
    #[serde(default)]
    pairs: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl PredictionDocument {
    pub fn get(&self, conversation_id: &str) -> Option<&ConversationPrediction> {
        self.conversations.iter().find(|c| c.conversation_id == conversation_id)
    }

    pub fn to_json(&self) -> String {
        let raw: Vec<RawPrediction> = self
            .conversations
            .iter()
            .map(|c| RawPrediction {
                conversation_id: serde_json::Value::String(c.conversation_id.clone()),
                emotions: c.emotions.iter().map(|(k, v)| (*k, v.to_string())).collect(),
                pairs: c.pairs.iter().map(EmotionCausePair::to_strings).collect(),
                provenance: c.provenance.clone(),
            })
            .collect();
        let mut out = serde_json::to_string_pretty(&raw).expect("prediction document serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: Vec<RawPrediction> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let conversations = raw
            .into_iter()
            .map(|r| {
                let conversation_id = match r.conversation_id {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => return Err(format!("bad conversation_ID {other}")),
                };
                let emotions = r
                    .emotions
                    .into_iter()
                    .map(|(k, v)| v.parse::<EmotionLabel>().map(|l| (k, l)).map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?;
                let pairs = r
                    .pairs
                    .iter()
                    .map(|p| {
                        let (e, label, c) = EmotionCausePair::parse_strings(p)?;
                        EmotionCausePair::new(e, label, c)
                            .ok_or_else(|| format!("pair {p:?} carries the neutral emotion"))
                    })
                    .collect::<Result<_, _>>()?;
                Ok(ConversationPrediction {
                    conversation_id,
                    emotions,
                    pairs,
                    provenance: r.provenance,
                })
            })
            .collect::<Result<_, String>>()?;
        Ok(PredictionDocument { conversations })
    }
}

/// `pairs ∪ {(j, e_j, j) : e_j ≠ neutral}`.
pub fn add_self_causes(
    pairs: &BTreeSet<EmotionCausePair>,
    emotions: &BTreeMap<u32, EmotionLabel>,
) -> BTreeSet<EmotionCausePair> {
    let mut out = pairs.clone();
    out.extend(
        emotions
            .iter()
            .filter_map(|(id, label)| EmotionCausePair::new(*id, *label, *id)),
    );
    out
}

#[derive(Debug, Clone, Default)]
pub struct EmotionOutcome {
    pub emotions: BTreeMap<u32, EmotionLabel>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, Default)]
pub struct CauseOutcome {
    pub pairs: BTreeSet<EmotionCausePair>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub document: PredictionDocument,
    pub failures: Vec<Failure>,
}

fn non_empty_text(response: &ModelResponse) -> Result<String, String> {
    response
        .as_text()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .ok_or_else(|| "empty response".to_string())
}

pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    backend: &'a dyn Backend,
    builder: PromptBuilder<'a>,
    icl: Option<&'a IclResources>,
    captions: Option<&'a CaptionCache>,
    cassette_digest: Option<String>,
    explanations: Mutex<BTreeMap<String, String>>,
    trace: Mutex<Vec<TraceEvent>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: &'a PipelineConfig,
        backend: &'a dyn Backend,
        builder: PromptBuilder<'a>,
        icl: Option<&'a IclResources>,
        captions: Option<&'a CaptionCache>,
    ) -> Result<Self, PipelineError> {
        if config.approach == Approach::Icl && icl.is_none() {
            return Err(PipelineError::Config(
                "the icl approach needs a conversation index and the 18 cause indices".into(),
            ));
        }
        if config.demonstrations == 0 {
            return Err(PipelineError::Config("demonstrations must be at least 1".into()));
        }
        if config.use_video_captions && config.approach == Approach::Icl && captions.is_none() {
            return Err(PipelineError::Config(
                "use_video_captions is set but no caption cache was given".into(),
            ));
        }
        Ok(Pipeline {
            config,
            backend,
            builder,
            icl: if config.approach == Approach::Icl { icl } else { None },
            captions,
            cassette_digest: None,
            explanations: Mutex::new(BTreeMap::new()),
            trace: Mutex::new(Vec::new()),
        })
    }

    pub fn with_cassette_digest(mut self, digest: impl Into<String>) -> Self {
        self.cassette_digest = Some(digest.into());
        self
    }

    /// Backend calls in issue order.
    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap().clone()
    }

    fn record(&self, conversation: &Conversation, step: Step, utterance_id: Option<u32>) {
        self.trace.lock().unwrap().push(TraceEvent {
            conversation_id: conversation.id.clone(),
            step,
            utterance_id,
        });
    }

    fn chat_request(&self, model: &str, prompt: &RenderedPrompt) -> ModelRequest {
        let mut messages = Vec::new();
        if let Some(system) = &self.config.system_prompt {
            messages.push(ChatMessage::system(system.clone()));
        }
        messages.push(ChatMessage::user(prompt.text.clone()));
        ModelRequest::chat(model, messages)
    }

    fn caption(&self, conversation: &Conversation) -> Option<&str> {
        if !self.config.use_video_captions {
            return None;
        }
        self.captions.and_then(|c| c.get(&conversation.id)).map(String::as_str)
    }

    fn failure(
        conversation: &Conversation,
        utterance_id: Option<u32>,
        step: Step,
        message: impl fmt::Display,
    ) -> Failure {
        let message = message.to_string();
        log::warn!(
            "conversation {} utterance {:?} {step:?}: {message}",
            conversation.id,
            utterance_id
        );
        Failure {
            conversation_id: conversation.id.clone(),
            utterance_id,
            step,
            message,
        }
    }

    fn embed(&self, conversation: &Conversation, text: &str) -> Result<Vec<f32>, RetrievalError> {
        self.record(conversation, Step::Embedding, None);
        GatewayEmbedder::new(self.backend, &self.config.embedding_model).embed(text)
    }

    /// Explanation for a demonstration, requested once per key and run.
    fn explanation(
        &self,
        conversation: &Conversation,
        step: Step,
        key: String,
        prompt: RenderedPrompt,
    ) -> Result<String, String> {
        let mut cache = self.explanations.lock().unwrap();
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        self.record(conversation, step, None);
        let request = self.chat_request(&self.config.explanation_model, &prompt);
        let out = complete_with_retry(&request, self.backend, self.config.retry, non_empty_text)
            .map_err(|e| e.to_string())?;
        cache.insert(key, out.value.clone());
        Ok(out.value)
    }

    fn emotion_demonstration(&self, conversation: &Conversation) -> Result<Demonstration, String> {
        let icl = self.icl.expect("icl resources checked at construction");
        let query = self
            .embed(conversation, &conversation.plain_text())
            .map_err(|e| e.to_string())?;
        let hits = icl
            .conversation_index
            .nearest(&query, self.config.demonstrations)
            .map_err(|e| e.to_string())?;
        let mut texts = Vec::new();
        let mut explanations = Vec::new();
        for hit in hits {
            let demo = icl
                .train
                .get(&hit.record.payload_ref)
                .ok_or_else(|| format!("demonstration {} not in training corpus", hit.record.payload_ref))?;
            let gold = demo
                .gold_emotions()
                .ok_or_else(|| format!("demonstration {} lacks gold emotions", demo.id))?;
            let text = annotated_block(&demo.utterances, Some(&gold), true);
            let prompt = self
                .builder
                .emotion_explanation_prompt(&text)
                .map_err(|e| e.to_string())?;
            explanations.push(self.explanation(
                conversation,
                Step::EmotionExplanation,
                format!("emotion:{}", demo.id),
                prompt,
            )?);
            texts.push(text);
        }
        Ok(join_demonstrations(texts, explanations))
    }

    /// Demonstration window for a cause prompt; `Ok(None)` when the
    /// (emotion, position) index is empty.
    fn cause_demonstration(
        &self,
        conversation: &Conversation,
        window_text: &str,
        key: IndexKey,
    ) -> Result<Option<Demonstration>, String> {
        let icl = self.icl.expect("icl resources checked at construction");
        let index = &icl.cause_indices[&key];
        if index.is_empty() {
            log::info!(
                "conversation {}: cause index {key} is empty, prompting without demonstration",
                conversation.id
            );
            return Ok(None);
        }
        let query = self.embed(conversation, window_text).map_err(|e| e.to_string())?;
        let hits = index
            .nearest(&query, self.config.demonstrations)
            .map_err(|e| e.to_string())?;
        let mut texts = Vec::new();
        let mut explanations = Vec::new();
        for hit in hits {
            let payload = &hit.record.payload_ref;
            let (conv_id, target) = payload
                .rsplit_once(':')
                .and_then(|(c, t)| t.parse::<u32>().ok().map(|t| (c, t)))
                .ok_or_else(|| format!("bad window reference {payload:?}"))?;
            let demo = icl
                .train
                .get(conv_id)
                .ok_or_else(|| format!("demonstration {conv_id} not in training corpus"))?;
            let gold = demo
                .gold_emotions()
                .ok_or_else(|| format!("demonstration {conv_id} lacks gold emotions"))?;
            let window = extract_window(demo, target).map_err(|e| e.to_string())?;
            let target_utt = demo.utterance(target).expect("window target exists");
            let emotion = gold[&target];
            let causes = demo.gold_causes_of(target);
            let block = annotated_block(window.utterances(demo), Some(&gold), false);
            let prompt = self
                .builder
                .cause_explanation_prompt(&block, target_utt, emotion, &causes)
                .map_err(|e| e.to_string())?;
            explanations.push(self.explanation(
                conversation,
                Step::CauseExplanation,
                format!("cause:{payload}"),
                prompt,
            )?);
            texts.push(format!(
                "{block}\nTarget utterance ({emotion}): {}\nCauses: {}",
                utterance_line(target_utt),
                format_id_list(&causes)
            ));
        }
        Ok(Some(join_demonstrations(texts, explanations)))
    }

    pub fn predict_emotions(&self, conversation: &Conversation) -> EmotionOutcome {
        let mut outcome = EmotionOutcome::default();
        if self.config.use_gold_emotions {
            if let Some(gold) = conversation.gold_emotions() {
                outcome.emotions = gold;
                return outcome;
            }
            outcome.failures.push(Self::failure(
                conversation,
                None,
                Step::Emotion,
                "gold emotions requested but missing",
            ));
        }

        let demonstration = match self.config.approach {
            Approach::FinetunedChat => None,
            Approach::Icl => match self.emotion_demonstration(conversation) {
                Ok(d) => Some(d),
                Err(message) => {
                    outcome
                        .failures
                        .push(Self::failure(conversation, None, Step::EmotionExplanation, message));
                    outcome.emotions = conversation.ids().map(|id| (id, EmotionLabel::Neutral)).collect();
                    return outcome;
                }
            },
        };
        let caption = self.caption(conversation);

        for utt in &conversation.utterances {
            let label = self
                .emotion_prompt(conversation, utt.id, demonstration.as_ref(), caption)
                .map_err(|e| e.to_string())
                .and_then(|prompt| {
                    self.record(conversation, Step::Emotion, Some(utt.id));
                    let request = self.chat_request(&self.config.emotion_model, &prompt);
                    complete_with_retry(&request, self.backend, self.config.retry, |r| {
                        parse_emotion(r.as_text().unwrap_or_default())
                            .map(|p| p.label)
                            .map_err(|e| e.to_string())
                    })
                    .map(|v| v.value)
                    .map_err(|e| e.to_string())
                });
            let label = label.unwrap_or_else(|message| {
                outcome
                    .failures
                    .push(Self::failure(conversation, Some(utt.id), Step::Emotion, message));
                EmotionLabel::Neutral
            });
            outcome.emotions.insert(utt.id, label);
        }
        outcome
    }

    fn emotion_prompt(
        &self,
        conversation: &Conversation,
        target: u32,
        demonstration: Option<&Demonstration>,
        caption: Option<&str>,
    ) -> Result<RenderedPrompt, crate::prompting::PromptError> {
        let mode = self.config.mode();
        let full = self
            .builder
            .emotion_prompt(conversation, target, mode, demonstration, caption, None)?;
        Ok(guard_token_budget(full, self.config.token_budget, || {
            let window = extract_window(conversation, target).expect("target in range");
            self.builder
                .emotion_prompt(conversation, target, mode, demonstration, caption, Some(&window))
        }))
    }

    pub fn predict_causes(&self, conversation: &Conversation, emotions: &BTreeMap<u32, EmotionLabel>) -> CauseOutcome {
        let mut outcome = CauseOutcome::default();
        let caption = self.caption(conversation);
        let mode = self.config.mode();
        for (&target, &emotion) in emotions.iter().filter(|(_, l)| !l.is_neutral()) {
            let result = (|| -> Result<BTreeSet<u32>, String> {
                let window = extract_window(conversation, target).map_err(|e| e.to_string())?;
                let (prompt, valid): (RenderedPrompt, BTreeSet<u32>) = match self.config.approach {
                    Approach::FinetunedChat => {
                        let full = self
                            .builder
                            .cause_prompt(conversation, None, target, emotions, mode, None, None)
                            .map_err(|e| e.to_string())?;
                        let prompt = guard_token_budget(full, self.config.token_budget, || {
                            self.builder
                                .cause_prompt(conversation, Some(&window), target, emotions, mode, None, None)
                        });
                        let valid = if prompt.windowed {
                            window.ids().collect()
                        } else {
                            conversation.ids().collect()
                        };
                        (prompt, valid)
                    }
                    Approach::Icl => {
                        let key = IndexKey::new(emotion, window.position).expect("emotion is not neutral");
                        let demo = self.cause_demonstration(conversation, &window.plain_text(conversation), key)?;
                        let prompt = self
                            .builder
                            .cause_prompt(
                                conversation,
                                Some(&window),
                                target,
                                emotions,
                                mode,
                                demo.as_ref(),
                                caption,
                            )
                            .map_err(|e| e.to_string())?;
                        (prompt, window.ids().collect())
                    }
                };
                self.record(conversation, Step::Cause, Some(target));
                let request = self.chat_request(&self.config.cause_model, &prompt);
                complete_with_retry(&request, self.backend, self.config.retry, |r| {
                    parse_causes(r.as_text().unwrap_or_default(), &valid)
                        .map(|p| p.cause_ids)
                        .map_err(|e| e.to_string())
                })
                .map(|v| v.value)
                .map_err(|e| e.to_string())
            })();
            match result {
                Ok(causes) => outcome.pairs.extend(
                    causes
                        .into_iter()
                        .filter_map(|c| EmotionCausePair::new(target, emotion, c)),
                ),
                Err(message) => outcome
                    .failures
                    .push(Self::failure(conversation, Some(target), Step::Cause, message)),
            }
        }
        outcome
    }

    fn provenance(&self, failures: &[Failure]) -> Provenance {
        let versions = self.builder.templates.versions();
        Provenance {
            approach: self.config.approach,
            add_self_causes: self.config.add_self_causes,
            use_video_captions: self.config.use_video_captions,
            use_gold_emotions: self.config.use_gold_emotions,
            templates: self
                .config
                .templates_used()
                .iter()
                .map(|t| (*t, versions[t].clone()))
                .collect(),
            cassette_digest: self.cassette_digest.clone(),
            failures: failures
                .iter()
                .map(|f| match f.utterance_id {
                    Some(u) => format!("{:?} utterance {u}: {}", f.step, f.message),
                    None => format!("{:?}: {}", f.step, f.message),
                })
                .collect(),
        }
    }

    pub fn predict_conversation(&self, conversation: &Conversation) -> (ConversationPrediction, Vec<Failure>) {
        let emotions = self.predict_emotions(conversation);
        let causes = self.predict_causes(conversation, &emotions.emotions);
        let pairs = if self.config.add_self_causes {
            add_self_causes(&causes.pairs, &emotions.emotions)
        } else {
            causes.pairs
        };
        let mut failures = emotions.failures;
        failures.extend(causes.failures);
        let prediction = ConversationPrediction {
            conversation_id: conversation.id.clone(),
            emotions: emotions.emotions,
            pairs,
            provenance: Some(self.provenance(&failures)),
        };
        (prediction, failures)
    }

    /// Runs every conversation; per-utterance failures are collected and
    /// the run continues.
    pub fn run(&self, corpus: &[Conversation]) -> RunOutcome {
        let limits = ThrottleLimits {
            max_concurrent: self.config.max_concurrent_conversations.max(1),
            min_interval_ms: 0,
        };
        let results = run_throttled(corpus.iter().collect(), limits, |c| self.predict_conversation(c));
        let mut document = PredictionDocument::default();
        let mut failures = Vec::new();
        for (prediction, f) in results {
            document.conversations.push(prediction);
            failures.extend(f);
        }
        RunOutcome { document, failures }
    }
}

fn join_demonstrations(texts: Vec<String>, explanations: Vec<String>) -> Demonstration {
    if texts.len() == 1 {
        return Demonstration {
            text: texts.into_iter().next().unwrap(),
            explanation: explanations.into_iter().next().unwrap(),
        };
    }
    let number = |items: Vec<String>| {
        items
            .into_iter()
            .enumerate()
            .map(|(i, t)| format!("Example {}:\n{t}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    Demonstration {
        text: number(texts),
        explanation: number(explanations),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    fn pair(e: u32, l: EmotionLabel, c: u32) -> EmotionCausePair {
        EmotionCausePair::new(e, l, c).unwrap()
    }

    #[test]
    fn self_causes_examples() {
        let out = add_self_causes(&BTreeSet::new(), &BTreeMap::from([(4, Joy)]));
        assert_eq!(out, BTreeSet::from([pair(4, Joy, 4)]));
        assert_eq!(add_self_causes(&out, &BTreeMap::from([(4, Joy)])), out);
        let out = add_self_causes(
            &BTreeSet::from([pair(3, Anger, 1)]),
            &BTreeMap::from([(2, Neutral), (3, Anger)]),
        );
        assert_eq!(out, BTreeSet::from([pair(3, Anger, 1), pair(3, Anger, 3)]));
    }

    #[test]
    fn document_round_trip() {
        let doc = PredictionDocument {
            conversations: vec![ConversationPrediction {
                conversation_id: "5".into(),
                emotions: BTreeMap::from([(1, Neutral), (2, Joy)]),
                pairs: BTreeSet::from([pair(2, Joy, 1)]),
                provenance: None,
            }],
        };
        let json = doc.to_json();
        assert!(json.contains(r#""2_joy""#));
        assert_eq!(PredictionDocument::from_json(&json).unwrap(), doc);
    }

    #[test]
    fn document_rejects_neutral_pairs() {
        let json = r#"[{"conversation_ID": "1", "emotions": {}, "pairs": [["1_neutral", "1"]]}]"#;
        assert!(PredictionDocument::from_json(json).is_err());
    }
}
