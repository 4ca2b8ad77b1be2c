//! Contracts for the three external capabilities: chat completion with token
//! log-probabilities, text embedding, and document search.
//!
//! One chat contract carries the policy, the critic, and the abstractor; each
//! role gets its own handle so they can point at different models.

mod fixture;
mod http;
mod mock;
mod retry;

pub use fixture::{query_fingerprint, write_corpus_entry, FixtureSearch};
pub use http::{HttpChat, HttpChatConfig, HttpEmbedder, HttpEmbedderConfig, WebSearch, WebSearchConfig};
pub use mock::{
    split_tokens, synthesize_positions, HashEmbedder, ScriptRule, ScriptedChat, ScriptedLogprobs,
    ScriptedResponse, TableEmbedder,
};
pub use retry::{with_retry, RetryPolicy};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::trajectory::{RetrievedDocument, TokenCandidate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("capability missing: {0}")]
    CapabilityMissing(String),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no scripted response for request fingerprint {0}")]
    Unscripted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unavailable { .. })
    }

    pub fn transport(message: impl Into<String>) -> Self {
        BackendError::Unavailable {
            attempts: 1,
            last_error: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
    /// Guidance injected by the metacognitive monitor.
    Monitor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
            Role::Monitor => "monitor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub want_logprobs: bool,
    pub top_logprobs: usize,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            want_logprobs: false,
            top_logprobs: 0,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }

    pub fn with_logprobs(mut self, top_logprobs: usize) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = top_logprobs;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.want_logprobs && self.top_logprobs == 0 {
            return Err(BackendError::InvalidRequest(
                "want_logprobs requires top_logprobs >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable hex digest of the message list.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(m.role.as_str().as_bytes());
            hasher.update([0u8]);
            hasher.update(m.content.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    /// Number of assistant turns already in the conversation.
    pub fn turn(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count()
    }
}

/// A generated token together with its top-K alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub token: String,
    pub top: Vec<TokenCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenPosition>>,
    pub finish_reason: FinishReason,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Enforce the logprob half of the chat contract on a raw response.
pub fn check_logprob_capability(
    request: &ChatRequest,
    response: &ChatResponse,
) -> Result<(), BackendError> {
    if request.want_logprobs && response.token_logprobs.is_none() {
        return Err(BackendError::CapabilityMissing(
            "token log-probabilities were requested but the endpoint returned none".into(),
        ));
    }
    Ok(())
}

pub trait EmbeddingBackend: Send + Sync {
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;
    fn dim(&self) -> usize;
    fn model_id(&self) -> &str;

    fn embed_one(&self, text: &str) -> Result<Embedding, BackendError> {
        let mut out = self.embed(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| BackendError::Protocol("embedding backend returned nothing".into()))
    }
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(BackendError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResultSet {
    pub query_string: String,
    pub documents: Vec<RetrievedDocument>,
}

pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Result<SearchResultSet, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        (**self).embed(texts)
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

impl<T: SearchBackend + ?Sized> SearchBackend for std::sync::Arc<T> {
    fn search(&self, query: &str, top_k: usize) -> Result<SearchResultSet, BackendError> {
        (**self).search(query, top_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_depends_on_roles_and_content() {
        let a = ChatRequest::new(vec![Message::new(Role::User, "hi")]);
        let b = ChatRequest::new(vec![Message::new(Role::System, "hi")]);
        let c = ChatRequest::new(vec![Message::new(Role::User, "hi")]).with_logprobs(5);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new(vec![]).validate().is_err());
        let mut r = ChatRequest::new(vec![Message::new(Role::User, "x")]);
        r.want_logprobs = true;
        assert!(r.validate().is_err());
        assert!(r.with_logprobs(1).validate().is_ok());
    }
}
