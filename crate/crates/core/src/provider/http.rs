//! OpenAI-compatible `/chat/completions` and `/embeddings` client.
//!
//! Transport failures (connect errors, timeouts, 429 and 5xx) are retried
//! with exponential backoff; every other failure is returned at once.

use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{ChatBackend, ChatReply, ChatRequest, EmbedBackend, EmbedReply, ProviderError, Usage};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
    /// Merged verbatim into every chat body (e.g. a backend's thinking
    /// switch).
    pub extra_body: Map<String, Value>,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, chat_model: impl Into<String>, embed_model: impl Into<String>, embed_dim: usize) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key: None,
            chat_model: chat_model.into(),
            embed_model: embed_model.into(),
            embed_dim,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            extra_body: Map::new(),
        }
    }

    /// Reads `MEM_PROVIDER_URL`, `MEM_PROVIDER_KEY`, `MEM_CHAT_MODEL`,
    /// `MEM_EMBED_MODEL`, `MEM_EMBED_DIM` and the optional `MEM_EXTRA_BODY`
    /// (a JSON object).
    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        let need = |k: &str| get(k).filter(|v| !v.is_empty()).ok_or_else(|| ProviderError::Config(format!("{k} is not set")));
        let dim = need("MEM_EMBED_DIM")?
            .parse::<usize>()
            .map_err(|e| ProviderError::Config(format!("MEM_EMBED_DIM: {e}")))?;
        let mut cfg = HttpConfig::new(need("MEM_PROVIDER_URL")?, need("MEM_CHAT_MODEL")?, need("MEM_EMBED_MODEL")?, dim);
        cfg.api_key = get("MEM_PROVIDER_KEY").filter(|k| !k.is_empty());
        if let Some(raw) = get("MEM_EXTRA_BODY").filter(|v| !v.is_empty()) {
            match serde_json::from_str(&raw) {
                Ok(Value::Object(m)) => cfg.extra_body = m,
                _ => return Err(ProviderError::Config("MEM_EXTRA_BODY must be a JSON object".into())),
            }
        }
        Ok(cfg)
    }
}

/// One client serving both chat and embeddings.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, ProviderError> {
        if cfg.embed_dim == 0 {
            return Err(ProviderError::Config("embedding dimension must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(HttpBackend { cfg, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retriable() && attempt < self.cfg.max_retries => {
                    std::thread::sleep(self.cfg.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Transport(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Rejected { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::protocol(e.to_string(), text))
    }
}

fn usage_of(v: &Value) -> Option<Usage> {
    let u = v.get("usage")?;
    Some(Usage {
        prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        let mut body = Map::new();
        body.insert("model".into(), json!(self.cfg.chat_model));
        body.insert("messages".into(), serde_json::to_value(&request.messages).expect("messages serialize"));
        if request.task.structured() {
            body.insert("response_format".into(), json!({ "type": "json_object" }));
        }
        for (k, v) in &self.cfg.extra_body {
            body.insert(k.clone(), v.clone());
        }
        let v = self.post("chat/completions", &Value::Object(body))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::protocol("missing choices[0].message.content", v.to_string()))?;
        Ok(ChatReply { text: text.to_string(), usage: usage_of(&v), latency_ms: None })
    }
}

impl EmbedBackend for HttpBackend {
    fn dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn embed(&self, texts: &[String]) -> Result<EmbedReply, ProviderError> {
        let v = self.post("embeddings", &json!({ "model": self.cfg.embed_model, "input": texts }))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::protocol("missing data array", v.to_string()))?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| ProviderError::protocol(format!("bad embedding at {i}"), v.to_string()))?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|r| r.0);
        let tokens = v.pointer("/usage/prompt_tokens").and_then(Value::as_u64);
        Ok(EmbedReply { vectors: rows.into_iter().map(|r| r.1).collect(), tokens, latency_ms: None })
    }
}
