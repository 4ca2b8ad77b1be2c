//! Deterministic stand-ins for the chat and embedding backends.

use std::collections::HashMap;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{
    check_embed_input, check_logprob_capability, BackendError, ChatBackend, ChatRequest,
    ChatResponse, EmbeddingBackend, FinishReason, TokenPosition,
};
use crate::embedding::Embedding;
use crate::trajectory::TokenCandidate;

/// How a scripted response reports token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScriptedLogprobs {
    /// The endpoint exposes no log-probabilities.
    #[default]
    None,
    Explicit { positions: Vec<TokenPosition> },
    /// Split the text into word-level tokens and give every position a
    /// distribution with exactly this entropy (nats).
    Synth { entropy: f64, candidates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default)]
    pub logprobs: ScriptedLogprobs,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: ScriptedLogprobs::None,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn with_entropy(text: impl Into<String>, entropy: f64, candidates: usize) -> Self {
        Self {
            text: text.into(),
            logprobs: ScriptedLogprobs::Synth {
                entropy,
                candidates,
            },
            finish_reason: FinishReason::Stop,
        }
    }

    fn render(&self) -> ChatResponse {
        let token_logprobs = match &self.logprobs {
            ScriptedLogprobs::None => None,
            ScriptedLogprobs::Explicit { positions } => Some(positions.clone()),
            ScriptedLogprobs::Synth {
                entropy,
                candidates,
            } => Some(synthesize_positions(&self.text, *entropy, *candidates)),
        };
        ChatResponse {
            text: self.text.clone(),
            token_logprobs,
            finish_reason: self.finish_reason,
        }
    }
}

/// A rule fires when every condition it sets holds. Rules are tried in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Substring that must appear in some message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Substring that must not appear in any message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excludes: Option<String>,
    /// Number of assistant messages already present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ScriptedResponse>,
    /// Simulate a transport failure with this message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

impl ScriptRule {
    pub fn respond(response: ScriptedResponse) -> Self {
        Self {
            response: Some(response),
            ..Default::default()
        }
    }

    pub fn on_turn(mut self, turn: usize) -> Self {
        self.turn = Some(turn);
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn excluding(mut self, needle: impl Into<String>) -> Self {
        self.excludes = Some(needle.into());
        self
    }

    fn matches(&self, request: &ChatRequest, fingerprint: &str) -> bool {
        if let Some(fp) = &self.fingerprint {
            if fp != fingerprint {
                return false;
            }
        }
        if let Some(turn) = self.turn {
            if request.turn() != turn {
                return false;
            }
        }
        if let Some(needle) = &self.contains {
            if !request.messages.iter().any(|m| m.content.contains(needle)) {
                return false;
            }
        }
        if let Some(needle) = &self.excludes {
            if request.messages.iter().any(|m| m.content.contains(needle)) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ScriptFile {
    rules: Vec<ScriptRule>,
}

/// Replays scripted responses; requests no rule matches are an error.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    rules: Vec<ScriptRule>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Load `{"rules": [...]}` from a JSON file.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidRequest(format!("script {}: {e}", path.display()))
        })?;
        let file: ScriptFile = serde_json::from_str(&text).map_err(|e| {
            BackendError::InvalidRequest(format!("script {}: {e}", path.display()))
        })?;
        Ok(Self::new(file.rules))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScriptFile {
            rules: self.rules.clone(),
        })
        .expect("script serializes")
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().clone()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.log.lock().push(request.clone());
        let fingerprint = request.fingerprint();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(request, &fingerprint))
            .ok_or_else(|| BackendError::Unscripted(fingerprint.clone()))?;
        if let Some(msg) = &rule.fail {
            return Err(BackendError::transport(msg.clone()));
        }
        let response = rule
            .response
            .as_ref()
            .ok_or_else(|| BackendError::Unscripted(fingerprint))?
            .render();
        check_logprob_capability(request, &response)?;
        Ok(response)
    }
}

/// Split text into word-level tokens whose concatenation is the text. A new
/// token starts after whitespace and before every `<`.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = false;
    for (i, ch) in text.char_indices() {
        let boundary = i > start && ((prev_ws && !ch.is_whitespace()) || ch == '<');
        if boundary {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ch.is_whitespace();
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn two_level_entropy(p: f64, k: usize) -> f64 {
    let rest = (1.0 - p) / (k - 1) as f64;
    let mut h = -p * p.ln();
    if rest > 0.0 {
        h -= (1.0 - p) * rest.ln();
    }
    h
}

/// Probabilities over `k` candidates (first = chosen token) with the given
/// entropy: one leading mass `p`, the rest shared equally.
fn distribution_with_entropy(entropy: f64, k: usize) -> Vec<f64> {
    if entropy <= 0.0 {
        return vec![1.0];
    }
    let k = k.max(((entropy.exp()).ceil() as usize) + 1).max(2);
    let (mut lo, mut hi) = (1.0 / k as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if two_level_entropy(mid, k) > entropy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    let rest = (1.0 - p) / (k - 1) as f64;
    std::iter::once(p)
        .chain(std::iter::repeat(rest).take(k - 1))
        .collect()
}

/// Token positions for `text` where every position's top-K distribution has
/// the requested entropy.
pub fn synthesize_positions(text: &str, entropy: f64, candidates: usize) -> Vec<TokenPosition> {
    let probs = distribution_with_entropy(entropy, candidates);
    split_tokens(text)
        .into_iter()
        .map(|tok| TokenPosition {
            token: tok.to_string(),
            top: probs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let t = if i == 0 {
                        tok.to_string()
                    } else {
                        format!("<alt{i}>")
                    };
                    TokenCandidate::new(t, p.ln())
                })
                .collect(),
        })
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed character n-gram embedding, L2-normalized. Texts are padded with
/// boundary markers so every non-empty text yields at least one n-gram.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    n: usize,
    seed: u64,
    model_id: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 3, 0)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, n: usize, seed: u64) -> Self {
        assert!(dim > 0 && n > 0);
        Self {
            dim,
            n,
            seed,
            model_id: format!("hash-ngram-n{n}-d{dim}-s{seed}"),
        }
    }

    /// Rebuild an embedder from its `model_id`, e.g. `hash-ngram-n3-d256-s0`.
    pub fn from_model_id(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("hash-ngram-n")?;
        let (n, rest) = rest.split_once("-d")?;
        let (dim, seed) = rest.split_once("-s")?;
        let (n, dim, seed) = (n.parse().ok()?, dim.parse().ok()?, seed.parse().ok()?);
        (n > 0 && dim > 0).then(|| Self::new(dim, n, seed))
    }

    pub fn vector(&self, text: &str) -> Embedding {
        let mut chars: Vec<char> = Vec::with_capacity(text.len() + 2);
        chars.push('\u{2}');
        chars.extend(text.chars());
        chars.push('\u{3}');
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for window in chars.windows(self.n.min(chars.len())) {
            buf.clear();
            buf.extend(window);
            let h = fnv1a(self.seed, buf.as_bytes());
            v[(h % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding::new(v)
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// Exact text → vector lookup, optionally falling back to hashing.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    table: HashMap<String, Embedding>,
    dim: usize,
    fallback: Option<HashEmbedder>,
}

impl TableEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            table: HashMap::new(),
            dim,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: HashEmbedder) -> Self {
        assert_eq!(fallback.dim(), self.dim);
        self.fallback = Some(fallback);
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Embedding) {
        assert_eq!(vector.dim(), self.dim);
        self.table.insert(text.into(), vector);
    }
}

impl EmbeddingBackend for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        check_embed_input(texts)?;
        texts
            .iter()
            .map(|t| match (self.table.get(t), &self.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(f)) => Ok(f.vector(t)),
                (None, None) => Err(BackendError::Protocol(format!("no table vector for {t:?}"))),
            })
            .collect()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        "table"
    }
}
