//! Dual-pool metacognitive memory: success experiences (M⁺) and failure
//! experiences (M⁻), each entry carrying a precomputed embedding
//! `f(session) + f(history summary)`.
//!
//! Retrieval is an exact cosine scan per pool; ties are broken by entry id.

pub mod abstraction;
mod build;
mod persist;

use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abstraction::{
    AbstractionBackend, LlmAbstractor, TemplateAbstractor, FAILURE_TEMPLATE_ID,
    SUCCESS_TEMPLATE_ID,
};
pub use build::{
    build_entry, history_digest, label_online, EntryContext, SessionSnapshot,
    NO_PRIOR_STEPS, OBSERVATION_SNAPSHOT_CHARS,
};
pub use persist::{load_store, parse_store, render_store, save_store, STORE_SCHEMA_VERSION};

use crate::backends::{BackendError, EmbeddingBackend};
use crate::embedding::Embedding;
use crate::trajectory::OutcomeLabel;

pub const DEFAULT_TAU_DUP: f64 = 0.95;
pub const DEFAULT_K_PER_POOL: usize = 2;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding dimension mismatch: store has {expected}, entry has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("entry id {0} already present")]
    DuplicateEntryId(String),
    #[error("invalid entry {id}: {reason}")]
    InvalidEntry { id: String, reason: String },
    #[error("memory entries require a success or failure label")]
    LabelRequired,
    #[error("abstraction failed: {0}")]
    AbstractionFailed(String),
    #[error("unsupported memory store schema version {0:?}")]
    UnsupportedVersion(String),
    #[error("memory store line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("memory store io: {0}")]
    Io(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trajectory_id: String,
    pub session_index: u32,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub origin: Origin,
    /// Which abstraction template produced the entry.
    pub template_id: String,
}

/// Label-conditioned description of the cognitive behaviour in one step.
/// Success and failure prompts share this structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abstraction {
    pub behavior_pattern: String,
    pub evidence: String,
    pub insight: String,
}

impl Abstraction {
    pub fn is_empty(&self) -> bool {
        self.behavior_pattern.trim().is_empty()
            && self.evidence.trim().is_empty()
            && self.insight.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub session_snapshot: SessionSnapshot,
    pub history_summary: String,
    pub abstraction: Abstraction,
    pub label: OutcomeLabel,
    pub embedding: Embedding,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    DiscardedDuplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub entry: MemoryEntry,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub success_hits: Vec<Hit>,
    pub failure_hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.success_hits.is_empty() && self.failure_hits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    success: Vec<MemoryEntry>,
    failure: Vec<MemoryEntry>,
    tau_dup: f64,
    embed_dim: usize,
    embedding_model_id: String,
}

/// Memory shared between concurrent trajectories: many readers, one writer.
pub type SharedMemory = Arc<RwLock<MemoryStore>>;

impl MemoryStore {
    pub fn new(embed_dim: usize, tau_dup: f64, embedding_model_id: impl Into<String>) -> Self {
        assert!(
            tau_dup > 0.0 && tau_dup <= 1.0,
            "tau_dup must lie in (0, 1], got {tau_dup}"
        );
        Self {
            success: Vec::new(),
            failure: Vec::new(),
            tau_dup,
            embed_dim,
            embedding_model_id: embedding_model_id.into(),
        }
    }

    pub fn into_shared(self) -> SharedMemory {
        Arc::new(RwLock::new(self))
    }

    pub fn tau_dup(&self) -> f64 {
        self.tau_dup
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embedding_model_id(&self) -> &str {
        &self.embedding_model_id
    }

    pub fn success_pool(&self) -> &[MemoryEntry] {
        &self.success
    }

    pub fn failure_pool(&self) -> &[MemoryEntry] {
        &self.failure
    }

    pub fn pool(&self, label: OutcomeLabel) -> &[MemoryEntry] {
        match label {
            OutcomeLabel::Success => &self.success,
            OutcomeLabel::Failure => &self.failure,
        }
    }

    pub fn len(&self) -> usize {
        self.success.len() + self.failure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.success.iter().chain(self.failure.iter())
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries().any(|e| e.entry_id == id)
    }

    fn check_entry(&self, entry: &MemoryEntry) -> Result<(), MemoryError> {
        if entry.embedding.dim() != self.embed_dim {
            return Err(MemoryError::DimMismatch {
                expected: self.embed_dim,
                found: entry.embedding.dim(),
            });
        }
        let invalid = |reason: &str| MemoryError::InvalidEntry {
            id: entry.entry_id.clone(),
            reason: reason.into(),
        };
        if !entry.embedding.is_finite() {
            return Err(invalid("embedding has non-finite values"));
        }
        if entry.abstraction.is_empty() {
            return Err(invalid("abstraction is empty"));
        }
        Ok(())
    }

    /// Highest cosine similarity between `embedding` and the given pool,
    /// `-1` for an empty pool.
    pub fn max_similarity(&self, label: OutcomeLabel, embedding: &Embedding) -> f64 {
        self.pool(label)
            .iter()
            .map(|e| e.embedding.cosine(embedding))
            .fold(-1.0, f64::max)
    }

    /// Add an entry to the pool matching its label unless a pool member is
    /// at least `tau_dup` similar. Existing entries are never touched.
    pub fn insert(&mut self, entry: MemoryEntry) -> Result<InsertOutcome, MemoryError> {
        self.check_entry(&entry)?;
        if self.max_similarity(entry.label, &entry.embedding) >= self.tau_dup {
            return Ok(InsertOutcome::DiscardedDuplicate);
        }
        if self.contains_id(&entry.entry_id) {
            return Err(MemoryError::DuplicateEntryId(entry.entry_id));
        }
        match entry.label {
            OutcomeLabel::Success => self.success.push(entry),
            OutcomeLabel::Failure => self.failure.push(entry),
        }
        Ok(InsertOutcome::Inserted)
    }

    /// Store entries without dedup; used when loading a saved store.
    fn push_unchecked(&mut self, entry: MemoryEntry) {
        match entry.label {
            OutcomeLabel::Success => self.success.push(entry),
            OutcomeLabel::Failure => self.failure.push(entry),
        }
    }

    /// Top-`k` per pool by cosine similarity to `query`.
    pub fn retrieve_by_embedding(
        &self,
        query: &Embedding,
        k: usize,
    ) -> Result<RetrievalResult, MemoryError> {
        if query.dim() != self.embed_dim {
            return Err(MemoryError::DimMismatch {
                expected: self.embed_dim,
                found: query.dim(),
            });
        }
        Ok(RetrievalResult {
            success_hits: top_k(&self.success, query, k),
            failure_hits: top_k(&self.failure, query, k),
        })
    }

    /// Retrieve experiences for a session. The query embedding covers the
    /// session snapshot only; stored entries also include their history.
    pub fn retrieve(
        &self,
        snapshot: &SessionSnapshot,
        embedder: &dyn EmbeddingBackend,
        k: usize,
    ) -> Result<RetrievalResult, MemoryError> {
        if embedder.dim() != self.embed_dim {
            return Err(MemoryError::DimMismatch {
                expected: self.embed_dim,
                found: embedder.dim(),
            });
        }
        if self.is_empty() || k == 0 {
            return Ok(RetrievalResult::default());
        }
        let query = embedder.embed_one(&snapshot.text())?;
        self.retrieve_by_embedding(&query, k)
    }
}

fn top_k(pool: &[MemoryEntry], query: &Embedding, k: usize) -> Vec<Hit> {
    let mut scored: Vec<(f64, &MemoryEntry)> = pool
        .iter()
        .map(|e| (e.embedding.cosine(query), e))
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.entry_id.cmp(&b.1.entry_id))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(similarity, e)| Hit {
            entry: e.clone(),
            similarity,
        })
        .collect()
}
