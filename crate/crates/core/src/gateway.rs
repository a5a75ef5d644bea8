//! Chat, vision and embedding backends behind one request/response shape.
//!
//! Requests are plain data so they can be hashed into a stable digest; the
//! [`Cassette`] backend records responses under that digest and replays them
//! offline. [`HttpBackend`] speaks the OpenAI-compatible JSON wire format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "ECA_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("replay cassette has no entry for request {digest}")]
    ReplayMiss { digest: String },
    #[error("backend returned {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response kind does not match request kind {0:?}")]
    KindMismatch(RequestKind),
    #[error("no valid response after {} attempts", attempts.len())]
    RetriesExhausted { attempts: Vec<String> },
    #[error("cassette {path}: {message}")]
    Cassette { path: PathBuf, message: String },
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::RateLimited { .. } => true,
            GatewayError::Backend { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Chat,
    Vision,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

/// A single image attached to a vision request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub mime: String,
    pub data_base64: String,
}

/// The three call kinds. Vision carries exactly one image; embeddings carry
/// no sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelRequest {
    Chat {
        model_id: String,
        messages: Vec<ChatMessage>,
        params: SamplingParams,
    },
    Vision {
        model_id: String,
        messages: Vec<ChatMessage>,
        image: EncodedImage,
        params: SamplingParams,
    },
    Embedding {
        model_id: String,
        input: String,
    },
}

impl ModelRequest {
    pub fn chat(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ModelRequest::Chat {
            model_id: model_id.into(),
            messages,
            params: SamplingParams::default(),
        }
    }

    pub fn embedding(model_id: impl Into<String>, input: impl Into<String>) -> Self {
        ModelRequest::Embedding {
            model_id: model_id.into(),
            input: input.into(),
        }
    }

    pub fn kind(&self) -> RequestKind {
        match self {
            ModelRequest::Chat { .. } => RequestKind::Chat,
            ModelRequest::Vision { .. } => RequestKind::Vision,
            ModelRequest::Embedding { .. } => RequestKind::Embedding,
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            ModelRequest::Chat { model_id, .. }
            | ModelRequest::Vision { model_id, .. }
            | ModelRequest::Embedding { model_id, .. } => model_id,
        }
    }

    /// Concatenated message text (or embedding input).
    pub fn text(&self) -> String {
        match self {
            ModelRequest::Chat { messages, .. } | ModelRequest::Vision { messages, .. } => messages
                .iter()
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
            ModelRequest::Embedding { input, .. } => input.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id().is_empty() {
            return Err(GatewayError::InvalidRequest("empty model id".into()));
        }
        match self {
            ModelRequest::Chat { messages, .. } if messages.is_empty() => {
                Err(GatewayError::InvalidRequest("chat request without messages".into()))
            }
            ModelRequest::Vision { image, .. } if image.data_base64.is_empty() => {
                Err(GatewayError::InvalidRequest("vision request without image data".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Hex SHA-256 over the request serialized with sorted keys.
pub fn request_digest(request: &ModelRequest) -> String {
    let value = serde_json::to_value(request).expect("requests serialize");
    let canonical = canonical_json(&value);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, String> = map.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{v}", Value::String(k.clone())))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseContent {
    Text(String),
    Embedding(Vec<f32>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub content: ResponseContent,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ModelResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ModelResponse {
            content: ResponseContent::Text(text.into()),
            usage: Usage::default(),
            latency_ms: 0,
        }
    }

    pub fn embedding(vector: Vec<f32>) -> Self {
        ModelResponse {
            content: ResponseContent::Embedding(vector),
            usage: Usage::default(),
            latency_ms: 0,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.content {
            ResponseContent::Text(t) => Some(t),
            ResponseContent::Embedding(_) => None,
        }
    }

    pub fn as_embedding(&self) -> Option<&[f32]> {
        match &self.content {
            ResponseContent::Embedding(v) => Some(v),
            ResponseContent::Text(_) => None,
        }
    }

    fn matches(&self, kind: RequestKind) -> bool {
        matches!(
            (&self.content, kind),
            (ResponseContent::Text(_), RequestKind::Chat | RequestKind::Vision)
                | (ResponseContent::Embedding(_), RequestKind::Embedding)
        )
    }

    /// Raw text for diagnostics.
    pub fn raw(&self) -> String {
        match &self.content {
            ResponseContent::Text(t) => t.clone(),
            ResponseContent::Embedding(v) => format!("<embedding dim={}>", v.len()),
        }
    }
}

/// Anything that can answer a [`ModelRequest`]. Implementations must be safe
/// for concurrent calls.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// Checks the request, calls the backend and checks the response kind.
pub fn complete(request: &ModelRequest, backend: &dyn Backend) -> Result<ModelResponse, GatewayError> {
    request.validate()?;
    let response = backend.complete(request)?;
    if !response.matches(request.kind()) {
        return Err(GatewayError::KindMismatch(request.kind()));
    }
    Ok(response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Pause between attempts after a retryable transport failure.
    #[serde(default)]
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Validated<T> {
    pub value: T,
    pub attempts: u32,
    pub raw: String,
}

/// Re-issues `request` until `validator` accepts a response or the attempt
/// budget runs out. Transport failures and rate limits consume attempts;
/// replay misses and client errors abort immediately.
pub fn complete_with_retry<T>(
    request: &ModelRequest,
    backend: &dyn Backend,
    policy: RetryPolicy,
    validator: impl Fn(&ModelResponse) -> Result<T, String>,
) -> Result<Validated<T>, GatewayError> {
    if policy.max_attempts == 0 {
        return Err(GatewayError::InvalidRequest("max_attempts must be at least 1".into()));
    }
    let mut attempts = Vec::new();
    for attempt in 1..=policy.max_attempts {
        match complete(request, backend) {
            Ok(response) => match validator(&response) {
                Ok(value) => {
                    return Ok(Validated {
                        value,
                        attempts: attempt,
                        raw: response.raw(),
                    })
                }
                Err(why) => {
                    log::debug!("attempt {attempt} rejected: {why}");
                    attempts.push(response.raw());
                }
            },
            Err(err) if err.is_retryable() => {
                attempts.push(format!("error: {err}"));
                if attempt < policy.max_attempts {
                    let wait = match err {
                        GatewayError::RateLimited {
                            retry_after_ms: Some(ms),
                        } => ms,
                        _ => policy.backoff_ms,
                    };
                    thread::sleep(Duration::from_millis(wait));
                }
            }
            Err(err) => return Err(err),
        }
    }
    Err(GatewayError::RetriesExhausted { attempts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum CassetteEntry {
    Many(Vec<ModelResponse>),
    One(Box<ModelResponse>),
}

/// Responses keyed by request digest. A digest may hold several responses;
/// replay hands them out in order and repeats the last one.
pub struct Cassette {
    mode: CassetteMode,
    inner: Option<Arc<dyn Backend>>,
    entries: Mutex<BTreeMap<String, Vec<ModelResponse>>>,
    cursors: Mutex<HashMap<String, usize>>,
    source_digest: String,
}

impl Cassette {
    pub fn replay(entries: BTreeMap<String, Vec<ModelResponse>>) -> Self {
        Cassette::new(CassetteMode::Replay, entries, None)
    }

    /// `inner` is never consulted in replay mode.
    pub fn new(
        mode: CassetteMode,
        entries: BTreeMap<String, Vec<ModelResponse>>,
        inner: Option<Arc<dyn Backend>>,
    ) -> Self {
        let source_digest = hex::encode(Sha256::digest(Self::serialize(&entries).as_bytes()));
        Cassette {
            mode,
            inner,
            entries: Mutex::new(entries),
            cursors: Mutex::new(HashMap::new()),
            source_digest,
        }
    }

    pub fn load(
        path: impl AsRef<Path>,
        mode: CassetteMode,
        inner: Option<Arc<dyn Backend>>,
    ) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let err = |message: String| GatewayError::Cassette {
            path: path.to_path_buf(),
            message,
        };
        let entries = if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            let raw: BTreeMap<String, CassetteEntry> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
            raw.into_iter()
                .map(|(k, v)| {
                    let list = match v {
                        CassetteEntry::Many(list) => list,
                        CassetteEntry::One(one) => vec![*one],
                    };
                    (k, list)
                })
                .collect()
        } else if mode == CassetteMode::Replay {
            return Err(err("file not found".into()));
        } else {
            BTreeMap::new()
        };
        Ok(Cassette::new(mode, entries, inner))
    }

    fn serialize(entries: &BTreeMap<String, Vec<ModelResponse>>) -> String {
        serde_json::to_string_pretty(entries).expect("cassette serializes")
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    /// Digest of the entries as loaded, for provenance.
    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> BTreeMap<String, Vec<ModelResponse>> {
        self.entries.lock().unwrap().clone()
    }

    pub fn to_json(&self) -> String {
        Self::serialize(&self.entries.lock().unwrap())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| GatewayError::Cassette {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn inner(&self) -> Result<&Arc<dyn Backend>, GatewayError> {
        self.inner
            .as_ref()
            .ok_or_else(|| GatewayError::InvalidRequest(format!("{:?} cassette has no inner backend", self.mode)))
    }
}

impl Backend for Cassette {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let digest = request_digest(request);
        match self.mode {
            CassetteMode::Replay => {
                let entries = self.entries.lock().unwrap();
                let list = entries
                    .get(&digest)
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| GatewayError::ReplayMiss { digest: digest.clone() })?;
                let mut cursors = self.cursors.lock().unwrap();
                let cursor = cursors.entry(digest).or_insert(0);
                let response = list[(*cursor).min(list.len() - 1)].clone();
                *cursor += 1;
                Ok(response)
            }
            CassetteMode::Record => {
                let response = self.inner()?.complete(request)?;
                self.entries
                    .lock()
                    .unwrap()
                    .entry(digest)
                    .or_default()
                    .push(response.clone());
                Ok(response)
            }
            CassetteMode::Passthrough => self.inner()?.complete(request),
        }
    }
}

/// Wraps a closure as a backend; handy for scripted responses.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ModelRequest) -> Result<ModelResponse, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (self.0)(request)
    }
}

/// Fails every call with a transport error and counts the attempts.
#[derive(Default)]
pub struct OfflineBackend {
    calls: AtomicUsize,
}

impl OfflineBackend {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for OfflineBackend {
    fn complete(&self, _request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(GatewayError::Transport("network access is disabled".into()))
    }
}

/// OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the API key from [`API_KEY_ENV`].
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_key(base_url, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_key(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    fn messages_json(messages: &[ChatMessage], image: Option<&EncodedImage>) -> Vec<Value> {
        let last_user = messages.iter().rposition(|m| m.role == "user");
        messages
            .iter()
            .enumerate()
            .map(|(i, m)| match image {
                Some(img) if Some(i) == last_user => json!({
                    "role": m.role,
                    "content": [
                        {"type": "text", "text": m.content},
                        {"type": "image_url", "image_url": {"url": format!("data:{};base64,{}", img.mime, img.data_base64)}},
                    ],
                }),
                _ => json!({"role": m.role, "content": m.content}),
            })
            .collect()
    }

    /// Request path and JSON body for the wire.
    pub fn wire_body(request: &ModelRequest) -> (&'static str, Value) {
        let sampling = |body: &mut Value, params: &SamplingParams| {
            body["temperature"] = json!(params.temperature);
            if let Some(max) = params.max_output_tokens {
                body["max_tokens"] = json!(max);
            }
        };
        match request {
            ModelRequest::Chat {
                model_id,
                messages,
                params,
            } => {
                let mut body = json!({"model": model_id, "messages": Self::messages_json(messages, None)});
                sampling(&mut body, params);
                ("/chat/completions", body)
            }
            ModelRequest::Vision {
                model_id,
                messages,
                image,
                params,
            } => {
                let mut body = json!({"model": model_id, "messages": Self::messages_json(messages, Some(image))});
                sampling(&mut body, params);
                ("/chat/completions", body)
            }
            ModelRequest::Embedding { model_id, input } => ("/embeddings", json!({"model": model_id, "input": input})),
        }
    }

    fn parse_body(kind: RequestKind, body: &Value) -> Result<(ResponseContent, Usage), GatewayError> {
        let usage = Usage {
            prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0) as u32,
            completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0) as u32,
        };
        let malformed = || GatewayError::Backend {
            status: 200,
            body: format!("unexpected response shape: {body}"),
        };
        let content = match kind {
            RequestKind::Chat | RequestKind::Vision => ResponseContent::Text(
                body["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(malformed)?
                    .to_string(),
            ),
            RequestKind::Embedding => ResponseContent::Embedding(
                body["data"][0]["embedding"]
                    .as_array()
                    .ok_or_else(malformed)?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(malformed))
                    .collect::<Result<_, _>>()?,
            ),
        };
        Ok((content, usage))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let (path, body) = Self::wire_body(request);
        let started = Instant::now();
        let mut call = self.agent.post(format!("{}{path}", self.base_url));
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 {
            let retry_after_ms = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|secs| (secs * 1000.0) as u64);
            return Err(GatewayError::RateLimited { retry_after_ms });
        }
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Backend { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| GatewayError::Backend {
            status,
            body: format!("invalid JSON ({e}): {text}"),
        })?;
        let (content, usage) = Self::parse_body(request.kind(), &value)?;
        Ok(ModelResponse {
            content,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThrottleLimits {
    pub max_concurrent: usize,
    pub min_interval_ms: u64,
}

impl Default for ThrottleLimits {
    fn default() -> Self {
        ThrottleLimits {
            max_concurrent: 4,
            min_interval_ms: 0,
        }
    }
}

/// Caps in-flight calls and spaces out consecutive dispatches.
pub struct Throttle {
    limits: ThrottleLimits,
    in_flight: Mutex<usize>,
    released: Condvar,
    last_dispatch: Mutex<Option<Instant>>,
}

pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.throttle.in_flight.lock().unwrap() -= 1;
        self.throttle.released.notify_one();
    }
}

impl Throttle {
    pub fn new(limits: ThrottleLimits) -> Self {
        Throttle {
            limits: ThrottleLimits {
                max_concurrent: limits.max_concurrent.max(1),
                ..limits
            },
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            last_dispatch: Mutex::new(None),
        }
    }

    pub fn limits(&self) -> ThrottleLimits {
        self.limits
    }

    /// Blocks until a slot is free and the pacing interval has elapsed.
    pub fn acquire(&self) -> Permit<'_> {
        let mut in_flight = self.in_flight.lock().unwrap();
        while *in_flight >= self.limits.max_concurrent {
            in_flight = self.released.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        drop(in_flight);

        let interval = Duration::from_millis(self.limits.min_interval_ms);
        let mut last = self.last_dispatch.lock().unwrap();
        if let Some(prev) = *last {
            let ready = prev + interval;
            let now = Instant::now();
            if ready > now {
                thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
        Permit { throttle: self }
    }
}

/// Maps `work` over `items` under `limits`; results keep input order.
pub fn run_throttled<T, R, F>(items: Vec<T>, limits: ThrottleLimits, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let throttle = Throttle::new(limits);
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    let workers = throttle.limits.max_concurrent.min(n.max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let permit = throttle.acquire();
                let Some((idx, item)) = queue.lock().unwrap().next() else {
                    drop(permit);
                    break;
                };
                let out = work(item);
                drop(permit);
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Backend wrapper that routes every call through a shared [`Throttle`].
pub struct ThrottledBackend<B> {
    inner: B,
    throttle: Throttle,
}

impl<B: Backend> ThrottledBackend<B> {
    pub fn new(inner: B, limits: ThrottleLimits) -> Self {
        ThrottledBackend {
            inner,
            throttle: Throttle::new(limits),
        }
    }
}

impl<B: Backend> Backend for ThrottledBackend<B> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let _permit = self.throttle.acquire();
        self.inner.complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat(text: &str) -> ModelRequest {
        ModelRequest::chat("m", vec![ChatMessage::user(text)])
    }

    #[test]
    fn digest_is_stable_and_temperature_sensitive() {
        let a = chat("hello");
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
        let mut b = a.clone();
        if let ModelRequest::Chat { params, .. } = &mut b {
            params.temperature = 0.7;
        }
        assert_ne!(request_digest(&a), request_digest(&b));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": "x"}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":"x","d":[1,{"y":1,"z":0}]},"b":1}"#);
    }

    #[test]
    fn replay_hit_and_miss() {
        let req = chat("hi");
        let mut entries = BTreeMap::new();
        entries.insert(request_digest(&req), vec![ModelResponse::text("hello")]);
        let cassette = Cassette::replay(entries);
        assert_eq!(complete(&req, &cassette).unwrap().as_text(), Some("hello"));
        assert!(matches!(
            complete(&chat("other"), &cassette),
            Err(GatewayError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn replay_never_touches_inner() {
        let offline = Arc::new(OfflineBackend::default());
        let cassette = Cassette::new(CassetteMode::Replay, BTreeMap::new(), Some(offline.clone()));
        assert!(cassette.complete(&chat("x")).is_err());
        assert_eq!(offline.calls(), 0);
    }

    #[test]
    fn record_then_replay() {
        let inner: Arc<dyn Backend> = Arc::new(FnBackend(|r: &ModelRequest| {
            Ok(ModelResponse::text(r.text().to_uppercase()))
        }));
        let rec = Cassette::new(CassetteMode::Record, BTreeMap::new(), Some(inner));
        assert_eq!(rec.complete(&chat("abc")).unwrap().as_text(), Some("ABC"));
        let replay = Cassette::replay(rec.entries());
        assert_eq!(replay.complete(&chat("abc")).unwrap().as_text(), Some("ABC"));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let b = FnBackend(|_: &ModelRequest| Ok(ModelResponse::text("oops")));
        assert_eq!(
            complete(&ModelRequest::embedding("e", "x"), &b).unwrap_err(),
            GatewayError::KindMismatch(RequestKind::Embedding)
        );
    }

    #[test]
    fn retry_short_circuits_on_first_valid() {
        let calls = AtomicUsize::new(0);
        let b = FnBackend(|_: &ModelRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(ModelResponse::text("ok"))
        });
        let out = complete_with_retry(&chat("q"), &b, RetryPolicy::default(), |r| Ok(r.raw())).unwrap();
        assert_eq!(out.attempts, 1);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_exhaustion_keeps_attempts() {
        let b = FnBackend(|_: &ModelRequest| Ok(ModelResponse::text("garbage")));
        let policy = RetryPolicy {
            max_attempts: 1,
            backoff_ms: 0,
        };
        match complete_with_retry(&chat("q"), &b, policy, |_| Err::<(), _>("bad".into())) {
            Err(GatewayError::RetriesExhausted { attempts }) => assert_eq!(attempts, vec!["garbage".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retry_does_not_repeat_replay_miss() {
        let cassette = Cassette::replay(BTreeMap::new());
        let policy = RetryPolicy {
            max_attempts: 5,
            backoff_ms: 0,
        };
        assert!(matches!(
            complete_with_retry(&chat("q"), &cassette, policy, |r| Ok(r.raw())),
            Err(GatewayError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn wire_shapes() {
        let (path, body) = HttpBackend::wire_body(&ModelRequest::embedding("ada", "text"));
        assert_eq!(path, "/embeddings");
        assert_eq!(body, json!({"model": "ada", "input": "text"}));
        let vision = ModelRequest::Vision {
            model_id: "v".into(),
            messages: vec![ChatMessage::system("s"), ChatMessage::user("describe")],
            image: EncodedImage {
                mime: "image/png".into(),
                data_base64: "AAAA".into(),
            },
            params: SamplingParams::default(),
        };
        let (path, body) = HttpBackend::wire_body(&vision);
        assert_eq!(path, "/chat/completions");
        assert_eq!(body["messages"][0]["content"], "s");
        assert_eq!(
            body["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AAAA"
        );
        assert_eq!(body["temperature"], 0.0);
    }
}
