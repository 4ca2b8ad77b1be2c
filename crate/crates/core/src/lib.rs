//! Runtime for deep-search (ReAct) agents with hierarchical metacognitive
//! monitoring.
//!
//! A fast consistency monitor compares the entropy of each retrieval step's
//! evidence (searching entropy) against the entropy of the agent's own
//! reasoning tokens (reasoning entropy) through a calibrated linear model.
//! Steps whose residual exceeds `k·σ` trigger a slow monitor that retrieves
//! similar success/failure experiences from a dual-pool memory and asks a
//! critic model for a corrective suggestion, which is injected into the next
//! policy step.

pub mod backends;
pub mod calibration;
pub mod config;
pub mod critic;
pub mod embedding;
pub mod memory;
pub mod orchestrator;
pub mod replay;
pub mod signals;
pub mod template;
pub mod testing;
pub mod trajectory;

pub use backends::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingBackend, FinishReason, Message,
    Role, SearchBackend, SearchResultSet, TokenPosition,
};
pub use calibration::{CalibrationModel, CalibrationPoint};
pub use critic::{Critic, Critique, CriticVerdict};
pub use embedding::Embedding;
pub use memory::{MemoryEntry, MemoryStore, RetrievalResult};
pub use orchestrator::{Agent, Deps, RunConfig, StepOutcome};
pub use signals::{ClusterAssignment, ClusterParams, UncertaintySignals};
pub use trajectory::{
    Action, Outcome, OutcomeLabel, Query, RetrievedDocument, Session, Termination, TokenCandidate,
    Trajectory,
};
