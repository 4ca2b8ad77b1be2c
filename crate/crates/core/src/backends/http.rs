//! HTTP implementations: an OpenAI-compatible chat-completions client with
//! top-K token log-probabilities, an OpenAI-compatible embeddings client, and
//! a web search client (search API followed by page-to-text extraction).

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use reqwest::blocking::{Client, RequestBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_embed_input, with_retry, BackendError, ChatBackend, ChatRequest, ChatResponse,
    EmbeddingBackend, FinishReason, RetryPolicy, Role, SearchBackend, SearchResultSet,
    TokenPosition,
};
use crate::embedding::Embedding;
use crate::trajectory::{RetrievedDocument, TokenCandidate};

/// Caps in-flight requests per backend handle.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock();
            while *n >= self.max {
                self.cv.wait(&mut n);
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock() -= 1;
        self.cv.notify_one();
        out
    }
}

fn build_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))
}

/// Send and decode JSON, classifying failures as transient (transport, 429,
/// 5xx) or permanent (other 4xx, undecodable body).
fn send_json(builder: RequestBuilder) -> Result<Value, BackendError> {
    let resp = builder
        .send()
        .map_err(|e| BackendError::transport(e.to_string()))?;
    let status = resp.status();
    let body = resp
        .text()
        .map_err(|e| BackendError::transport(e.to_string()))?;
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(BackendError::transport(format!("HTTP {status}: {body}")));
    }
    if !status.is_success() {
        return Err(BackendError::Protocol(format!("HTTP {status}: {body}")));
    }
    serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("invalid JSON: {e}")))
}

fn send_text(builder: RequestBuilder) -> Result<String, BackendError> {
    let resp = builder
        .send()
        .map_err(|e| BackendError::transport(e.to_string()))?;
    let status = resp.status();
    let body = resp
        .text()
        .map_err(|e| BackendError::transport(e.to_string()))?;
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(BackendError::transport(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(BackendError::Protocol(format!("HTTP {status}")));
    }
    Ok(body)
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpChatConfig {
    /// Base URL, e.g. `https://api.example.com/v1`; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_concurrency: usize,
}

pub struct HttpChat {
    config: HttpChatConfig,
    client: Client,
    limiter: Limiter,
}

impl HttpChat {
    pub fn new(config: HttpChatConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(config.timeout)?,
            limiter: Limiter::new(config.max_concurrency),
            config,
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                // Chat endpoints only accept the standard roles; monitor
                // guidance and tool output travel as user turns.
                let role = match m.role {
                    Role::Monitor | Role::Tool => "user",
                    other => other.as_str(),
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        body
    }
}

pub(crate) fn parse_chat_response(
    value: &Value,
    want_logprobs: bool,
) -> Result<ChatResponse, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | Some("tool_calls") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Error,
    };
    let token_logprobs = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(items) => {
            let mut positions = Vec::with_capacity(items.len());
            for item in items {
                let token = item
                    .get("token")
                    .and_then(Value::as_str)
                    .ok_or_else(|| BackendError::Protocol("logprob entry without token".into()))?;
                let chosen_lp = item.get("logprob").and_then(Value::as_f64);
                let mut top: Vec<TokenCandidate> = item
                    .get("top_logprobs")
                    .and_then(Value::as_array)
                    .map(|alts| {
                        alts.iter()
                            .filter_map(|a| {
                                Some(TokenCandidate::new(
                                    a.get("token")?.as_str()?,
                                    a.get("logprob")?.as_f64()?,
                                ))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                if top.is_empty() {
                    if let Some(lp) = chosen_lp {
                        top.push(TokenCandidate::new(token, lp));
                    }
                }
                positions.push(TokenPosition {
                    token: token.to_string(),
                    top,
                });
            }
            Some(positions)
        }
        None => None,
    };
    if want_logprobs && token_logprobs.is_none() {
        return Err(BackendError::CapabilityMissing(
            "endpoint returned no token log-probabilities".into(),
        ));
    }
    Ok(ChatResponse {
        text,
        token_logprobs,
        finish_reason,
    })
}

impl ChatBackend for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let url = join_url(&self.config.endpoint, "chat/completions");
        let body = self.body(request);
        self.limiter.run(|| {
            with_retry(&self.config.retry, std::thread::sleep, || {
                let mut b = self.client.post(&url).json(&body);
                if let Some(key) = &self.config.api_key {
                    b = b.bearer_auth(key);
                }
                let value = send_json(b)?;
                parse_chat_response(&value, request.want_logprobs)
            })
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    /// Base URL; `/embeddings` is appended.
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Inputs longer than this many characters are truncated before sending.
    pub max_input_chars: Option<usize>,
    pub max_concurrency: usize,
}

pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    client: Client,
    limiter: Limiter,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(config.timeout)?,
            limiter: Limiter::new(config.max_concurrency),
            config,
        })
    }

    fn prepare(&self, text: &str) -> String {
        match self.config.max_input_chars {
            Some(limit) if text.chars().count() > limit => {
                log::debug!("truncating embedding input at {limit} characters");
                text.chars().take(limit).collect()
            }
            _ => text.to_string(),
        }
    }
}

pub(crate) fn parse_embedding_response(
    value: &Value,
    expected_len: usize,
    dim: usize,
) -> Result<Vec<Embedding>, BackendError> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("embedding response has no data".into()))?;
    let mut indexed: Vec<(usize, Embedding)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let values: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("embedding item without vector".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(BackendError::DimMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        indexed.push((index, Embedding::new(values)));
    }
    if indexed.len() != expected_len {
        return Err(BackendError::Protocol(format!(
            "expected {expected_len} embeddings, got {}",
            indexed.len()
        )));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, e)| e).collect())
}

impl EmbeddingBackend for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        check_embed_input(texts)?;
        let inputs: Vec<String> = texts.iter().map(|t| self.prepare(t)).collect();
        let url = join_url(&self.config.endpoint, "embeddings");
        let body = json!({"model": self.config.model, "input": inputs});
        self.limiter.run(|| {
            with_retry(&self.config.retry, std::thread::sleep, || {
                let mut b = self.client.post(&url).json(&body);
                if let Some(key) = &self.config.api_key {
                    b = b.bearer_auth(key);
                }
                let value = send_json(b)?;
                parse_embedding_response(&value, texts.len(), self.config.dim)
            })
        })
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WebSearchConfig {
    /// Search API URL accepting `{"q": ..., "num": ...}` and returning
    /// `{"organic": [{"title", "link", "snippet"}]}`.
    pub search_endpoint: String,
    /// Extraction base URL; the page URL is appended and the plain-text body returned.
    pub extract_endpoint: String,
    #[serde(skip)]
    pub search_api_key: Option<String>,
    #[serde(skip)]
    pub extract_api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_concurrency: usize,
}

pub struct WebSearch {
    config: WebSearchConfig,
    client: Client,
    limiter: Limiter,
}

impl WebSearch {
    pub fn new(config: WebSearchConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(config.timeout)?,
            limiter: Limiter::new(config.max_concurrency),
            config,
        })
    }

    fn extract(&self, url: &str) -> Result<String, BackendError> {
        let target = join_url(&self.config.extract_endpoint, url);
        with_retry(&self.config.retry, std::thread::sleep, || {
            let mut b = self.client.get(&target);
            if let Some(key) = &self.config.extract_api_key {
                b = b.bearer_auth(key);
            }
            send_text(b)
        })
    }
}

impl SearchBackend for WebSearch {
    fn search(&self, query: &str, top_k: usize) -> Result<SearchResultSet, BackendError> {
        if query.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty search query".into()));
        }
        let body = json!({"q": query, "num": top_k});
        let value = self.limiter.run(|| {
            with_retry(&self.config.retry, std::thread::sleep, || {
                let mut b = self.client.post(&self.config.search_endpoint).json(&body);
                if let Some(key) = &self.config.search_api_key {
                    b = b.header("X-API-KEY", key);
                }
                send_json(b)
            })
        })?;
        let hits = value
            .get("organic")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default();
        let mut documents = Vec::new();
        for hit in hits.iter().take(top_k) {
            let link = hit.get("link").and_then(Value::as_str).unwrap_or_default();
            let title = hit.get("title").and_then(Value::as_str).unwrap_or_default();
            let snippet = hit.get("snippet").and_then(Value::as_str).unwrap_or_default();
            let content = if link.is_empty() {
                snippet.to_string()
            } else {
                match self.limiter.run(|| self.extract(link)) {
                    Ok(text) if !text.trim().is_empty() => text,
                    Ok(_) => snippet.to_string(),
                    Err(e) => {
                        log::warn!("extraction failed for {link}: {e}");
                        snippet.to_string()
                    }
                }
            };
            if content.is_empty() {
                continue;
            }
            documents.push(RetrievedDocument {
                doc_id: if link.is_empty() {
                    format!("hit-{}", documents.len() + 1)
                } else {
                    link.to_string()
                },
                title: title.to_string(),
                content,
                rank: documents.len() as u32 + 1,
            });
        }
        Ok(SearchResultSet {
            query_string: query.to_string(),
            documents,
        })
    }
}
