//! Chat and embedding backends behind one accounting front end.
//!
//! [`Provider`] wraps a [`ChatBackend`] and an [`EmbedBackend`], validates
//! structured replies and keeps [`ProviderStats`]. Backends:
//! - [`mock`]: deterministic rule-based chat and hash embeddings;
//! - [`http`] (feature `http`): OpenAI-compatible endpoints.

pub mod mock;
pub mod protocol;

#[cfg(feature = "http")]
pub mod http;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::index::Embedding;
use crate::text::estimate_tokens;

pub use protocol::{PromptTemplates, Task};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    /// Connection failures, timeouts, 5xx and 429 responses.
    #[error("transport error: {0}")]
    Transport(String),
    /// A reply that does not match the requested schema.
    #[error("protocol error: {message}")]
    Protocol { message: String, payload: String },
    /// Non-retriable HTTP status.
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("provider misconfigured: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }

    pub fn protocol(message: impl Into<String>, payload: impl Into<String>) -> Self {
        ProviderError::Protocol { message: message.into(), payload: payload.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage { role: role.into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub task: Task,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// The JSON payload carried by the last user message.
    pub fn payload(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a chat backend returns before accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub usage: Option<Usage>,
    /// Simulated latency; real backends leave this empty and get timed.
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedReply {
    pub vectors: Vec<Vec<f64>>,
    pub tokens: Option<u64>,
    pub latency_ms: Option<f64>,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError>;
}

pub trait EmbedBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<EmbedReply, ProviderError>;
}

/// A completed chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    pub structured_schema: Option<Task>,
    pub response_text: String,
    pub usage: Usage,
    pub usage_estimated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderStats {
    /// Every chat call, successful or not.
    pub chat_calls: u64,
    /// Every embed call (one per batch of texts).
    pub embed_calls: u64,
    pub embedded_texts: u64,
    /// Calls of either kind that returned an error.
    pub failed_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub embed_tokens: u64,
    /// Backend time in whole microseconds, summed per call so the total does
    /// not depend on call order. Simulated under the mock.
    pub backend_us: u64,
    /// True once any token count came from the whitespace estimator.
    pub usage_estimated: bool,
    pub chat_calls_by_task: BTreeMap<Task, u64>,
}

impl ProviderStats {
    pub fn backend_ms(&self) -> f64 {
        self.backend_us as f64 / 1000.0
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens + self.embed_tokens
    }

    /// Field-wise `self - earlier` for counters.
    pub fn delta_since(&self, earlier: &ProviderStats) -> ProviderStats {
        let mut by_task = BTreeMap::new();
        for (task, n) in &self.chat_calls_by_task {
            let d = n - earlier.chat_calls_by_task.get(task).copied().unwrap_or(0);
            if d > 0 {
                by_task.insert(*task, d);
            }
        }
        ProviderStats {
            chat_calls: self.chat_calls - earlier.chat_calls,
            embed_calls: self.embed_calls - earlier.embed_calls,
            embedded_texts: self.embedded_texts - earlier.embedded_texts,
            failed_calls: self.failed_calls - earlier.failed_calls,
            prompt_tokens: self.prompt_tokens - earlier.prompt_tokens,
            completion_tokens: self.completion_tokens - earlier.completion_tokens,
            embed_tokens: self.embed_tokens - earlier.embed_tokens,
            backend_us: self.backend_us - earlier.backend_us,
            usage_estimated: self.usage_estimated,
            chat_calls_by_task: by_task,
        }
    }
}

fn to_us(ms: f64) -> u64 {
    (ms.max(0.0) * 1000.0).round() as u64
}

/// Accounting front end shared by the write pipeline and the reader.
pub struct Provider {
    chat: Arc<dyn ChatBackend>,
    embed: Arc<dyn EmbedBackend>,
    templates: PromptTemplates,
    stats: Mutex<ProviderStats>,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider").field("dim", &self.dim()).finish_non_exhaustive()
    }
}

impl Provider {
    pub fn new(chat: Arc<dyn ChatBackend>, embed: Arc<dyn EmbedBackend>) -> Self {
        Provider { chat, embed, templates: PromptTemplates::default(), stats: Mutex::new(ProviderStats::default()) }
    }

    /// Rule-based chat plus hash embeddings.
    pub fn mock(dim: usize, seed: u64) -> Self {
        Provider::new(Arc::new(mock::MockChat::new()), Arc::new(mock::MockEmbedder::new(dim, seed)))
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn dim(&self) -> usize {
        self.embed.dim()
    }

    pub fn stats(&self) -> ProviderStats {
        self.stats.lock().expect("stats lock").clone()
    }

    pub fn reset_stats(&self) {
        *self.stats.lock().expect("stats lock") = ProviderStats::default();
    }

    /// Builds the standard `[system template, user payload]` exchange.
    pub fn messages_for(&self, task: Task, payload: &impl Serialize) -> Vec<ChatMessage> {
        let body = serde_json::to_string(payload).expect("payload serializes");
        vec![ChatMessage::new("system", self.templates.for_task(task)), ChatMessage::new("user", body)]
    }

    pub fn chat(&self, task: Task, messages: Vec<ChatMessage>) -> Result<ChatExchange, ProviderError> {
        if messages.is_empty() {
            return Err(ProviderError::Input("chat needs at least one message".into()));
        }
        let request = ChatRequest { task, messages };
        let started = Instant::now();
        let result = self.chat.complete(&request);
        let measured = started.elapsed().as_secs_f64() * 1000.0;

        let mut stats = self.stats.lock().expect("stats lock");
        stats.chat_calls += 1;
        *stats.chat_calls_by_task.entry(task).or_default() += 1;
        let reply = match result {
            Ok(r) => r,
            Err(e) => {
                stats.failed_calls += 1;
                return Err(e);
            }
        };
        stats.backend_us += to_us(reply.latency_ms.unwrap_or(measured));
        let (usage, estimated) = match reply.usage {
            Some(u) => (u, false),
            None => {
                let prompt = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
                (Usage { prompt_tokens: prompt, completion_tokens: estimate_tokens(&reply.text) }, true)
            }
        };
        stats.prompt_tokens += usage.prompt_tokens;
        stats.completion_tokens += usage.completion_tokens;
        stats.usage_estimated |= estimated;
        if task.structured() {
            if let Err(message) = task.validate(&reply.text) {
                stats.failed_calls += 1;
                return Err(ProviderError::protocol(format!("{} reply: {message}", task.as_str()), reply.text));
            }
        }
        drop(stats);
        Ok(ChatExchange {
            messages: request.messages,
            structured_schema: task.structured().then_some(task),
            response_text: reply.text,
            usage,
            usage_estimated: estimated,
        })
    }

    /// Sends `payload` under `task` and parses the structured reply.
    pub fn chat_json<T: DeserializeOwned>(&self, task: Task, payload: &impl Serialize) -> Result<T, ProviderError> {
        let exchange = self.chat(task, self.messages_for(task, payload))?;
        serde_json::from_str(&exchange.response_text)
            .map_err(|e| ProviderError::protocol(e.to_string(), exchange.response_text))
    }

    /// Sends `payload` under a free-text task.
    pub fn chat_text(&self, task: Task, payload: &impl Serialize) -> Result<String, ProviderError> {
        Ok(self.chat(task, self.messages_for(task, payload))?.response_text)
    }

    /// Embeds `texts` in one backend call; every vector is unit-normalized
    /// and checked against the configured dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::Input(format!("text {i} is empty")));
        }
        let started = Instant::now();
        let result = self.embed.embed(texts);
        let measured = started.elapsed().as_secs_f64() * 1000.0;
        let mut stats = self.stats.lock().expect("stats lock");
        stats.embed_calls += 1;
        stats.embedded_texts += texts.len() as u64;
        let reply = match result {
            Ok(r) => r,
            Err(e) => {
                stats.failed_calls += 1;
                return Err(e);
            }
        };
        stats.backend_us += to_us(reply.latency_ms.unwrap_or(measured));
        match reply.tokens {
            Some(t) => stats.embed_tokens += t,
            None => {
                stats.embed_tokens += texts.iter().map(|t| estimate_tokens(t)).sum::<u64>();
                stats.usage_estimated = true;
            }
        }
        let dim = self.dim();
        let vectors = (|| {
            if reply.vectors.len() != texts.len() {
                return Err(format!("{} vectors for {} texts", reply.vectors.len(), texts.len()));
            }
            reply
                .vectors
                .into_iter()
                .map(|v| {
                    if v.len() != dim {
                        return Err(format!("vector of dimension {} (expected {dim})", v.len()));
                    }
                    Embedding::normalized(v).ok_or_else(|| "zero or non-finite vector".to_string())
                })
                .collect::<Result<Vec<_>, _>>()
        })();
        vectors.map_err(|m| {
            stats.failed_calls += 1;
            ProviderError::protocol(m, "")
        })
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, ProviderError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}
