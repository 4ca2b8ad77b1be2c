//! ReAct loop with the two monitors embedded.
//!
//! Each step: generate reasoning and an action, run the tool, measure SE/RE
//! on retrieval steps, ask the critic when the residual gate trips, and hand
//! the critic's suggestion to the next step as a monitor message.

mod batch;
pub mod policy;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use batch::{BatchReport, BatchSummary, QueryFailure, BATCH_SUMMARY_FILE};
pub use policy::{
    build_messages, parse_policy_output, ParsedAction, ParsedStep, DEFAULT_INJECTION_TEMPLATE,
    DEFAULT_POLICY_SYSTEM, SEARCH_TOOL,
};

use crate::backends::{BackendError, ChatBackend, ChatRequest, EmbeddingBackend, SearchBackend};
use crate::calibration::{CalibrationModel, DEFAULT_ANOMALY_K};
use crate::critic::{Critic, CriticFailure};
use crate::memory::{
    build_entry, history_digest, label_online, AbstractionBackend, EntryContext, InsertOutcome,
    Origin, SessionSnapshot, SharedMemory, DEFAULT_K_PER_POOL,
};
use crate::signals::{compute_signals, ClusterParams};
use crate::template::{Template, TemplateError};
use crate::trajectory::{
    serialize_trajectory, Action, Outcome, Query, RunHeader, Session, Termination, Trajectory,
};

pub const DEFAULT_DOC_TOP_K: usize = 5;
pub const DEFAULT_TOP_LOGPROBS: usize = 20;
pub const DEFAULT_MAX_STEPS: u32 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub max_steps: u32,
    pub k_per_pool: usize,
    pub fast_monitor_enabled: bool,
    pub slow_monitor_enabled: bool,
    pub online_memory_enabled: bool,
    /// Overrides the `k` stored with the calibration model.
    pub anomaly_k: f64,
    pub doc_top_k: usize,
    pub top_logprobs: usize,
    pub cluster: ClusterParams,
    /// Must contain the `{delta}` slot.
    pub injection_template: String,
    /// Rendered text, not a template.
    pub system_prompt: String,
    /// Grant one extra step when the last permitted step trips the gate.
    pub extra_step_on_terminal_anomaly: bool,
    pub log_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            k_per_pool: DEFAULT_K_PER_POOL,
            fast_monitor_enabled: true,
            slow_monitor_enabled: true,
            online_memory_enabled: false,
            anomaly_k: DEFAULT_ANOMALY_K,
            doc_top_k: DEFAULT_DOC_TOP_K,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            cluster: ClusterParams::default(),
            injection_template: DEFAULT_INJECTION_TEMPLATE.to_string(),
            system_prompt: policy::default_system_prompt(),
            extra_step_on_terminal_anomaly: false,
            log_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("fast monitor is enabled but no calibration model was supplied")]
    MissingCalibration,
    #[error("online memory is enabled but no abstraction backend was supplied")]
    MissingAbstractor,
    #[error("embedding backend has dimension {embedder} but the memory store expects {store}")]
    DimMismatch { embedder: usize, store: usize },
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::InvalidConfig(m.into()));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.k_per_pool == 0 {
            return bad("k_per_pool must be at least 1");
        }
        if self.doc_top_k == 0 {
            return bad("doc_top_k must be at least 1");
        }
        if !(self.anomaly_k.is_finite() && self.anomaly_k > 0.0) {
            return bad("anomaly_k must be a positive number");
        }
        if !(self.cluster.d_merge > 0.0 && self.cluster.d_merge < 2.0) {
            return bad("d_merge must lie in (0, 2)");
        }
        Template::parse("injection", &self.injection_template, &["delta"], &["delta"])?;
        Ok(())
    }
}

/// Everything a run talks to. Backends are shared across batch workers.
#[derive(Clone)]
pub struct Deps {
    pub policy: Arc<dyn ChatBackend>,
    pub critic_chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub search: Arc<dyn SearchBackend>,
    pub calibration: Option<CalibrationModel>,
    pub memory: SharedMemory,
    pub critic: Critic,
    pub abstractor: Option<Arc<dyn AbstractionBackend>>,
    /// Timestamp source for online memory entries.
    pub clock: fn() -> u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub session: Session,
    /// Guidance that was rendered into this step's prompt.
    pub injected_delta: Option<String>,
    /// Guidance produced by this step's critique, for the next step.
    pub next_delta: Option<String>,
    pub terminal: bool,
    pub critic_calls: u32,
    pub critic_failure: Option<CriticFailure>,
    pub memory_insert: Option<InsertOutcome>,
}

pub struct Agent {
    deps: Deps,
    cfg: RunConfig,
    injection: Template,
    calibration: Option<CalibrationModel>,
}

fn sanitize_id(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        format!("q{s}")
    } else {
        s
    }
}

/// Log file name for a query id.
pub fn log_file_name(query_id: &str) -> String {
    format!("{}.jsonl", sanitize_id(query_id))
}

pub fn write_log(trajectory: &Trajectory, dir: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(log_file_name(&trajectory.query.id));
    std::fs::write(&path, serialize_trajectory(trajectory))?;
    Ok(path)
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// Exact-match judge against an `answer` entry in the query metadata.
pub fn judge_exact(query: &Query, final_answer: Option<&str>) -> Outcome {
    match (query.metadata.get("answer"), final_answer) {
        (None, _) => Outcome::Unknown,
        (Some(_), None) => Outcome::Failure,
        (Some(gold), Some(given)) if normalize_answer(gold) == normalize_answer(given) => {
            Outcome::Success
        }
        _ => Outcome::Failure,
    }
}

impl Agent {
    pub fn new(deps: Deps, cfg: RunConfig) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let injection = Template::parse("injection", &cfg.injection_template, &["delta"], &["delta"])?;
        if cfg.fast_monitor_enabled && deps.calibration.is_none() {
            return Err(OrchestratorError::MissingCalibration);
        }
        if cfg.online_memory_enabled && deps.abstractor.is_none() {
            return Err(OrchestratorError::MissingAbstractor);
        }
        let store_dim = deps.memory.read().embed_dim();
        if (cfg.slow_monitor_enabled || cfg.online_memory_enabled)
            && store_dim != deps.embedder.dim()
        {
            return Err(OrchestratorError::DimMismatch {
                embedder: deps.embedder.dim(),
                store: store_dim,
            });
        }
        let calibration = deps.calibration.as_ref().map(|c| c.with_k(cfg.anomaly_k));
        Ok(Self {
            deps,
            cfg,
            injection,
            calibration,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn deps(&self) -> &Deps {
        &self.deps
    }

    /// Settings recorded in every log header.
    pub fn header(&self) -> RunHeader {
        RunHeader {
            max_steps: self.cfg.max_steps,
            doc_top_k: self.cfg.doc_top_k,
            k_per_pool: self.cfg.k_per_pool,
            anomaly_k: self.cfg.anomaly_k,
            top_logprobs: self.cfg.top_logprobs,
            d_merge: self.cfg.cluster.d_merge,
            mass_weighting: self.cfg.cluster.mass_weighting,
            fast_monitor_enabled: self.cfg.fast_monitor_enabled,
            slow_monitor_enabled: self.cfg.slow_monitor_enabled,
            online_memory_enabled: self.cfg.online_memory_enabled,
            calibration: self.calibration.clone(),
            embedding_model_id: Some(self.deps.embedder.model_id().to_string()),
        }
    }

    fn execute_tool(&self, action: &Action) -> (Vec<crate::trajectory::RetrievedDocument>, String) {
        let Action::ToolCall {
            tool_name,
            arguments,
        } = action
        else {
            return (Vec::new(), String::new());
        };
        if tool_name != SEARCH_TOOL {
            return (Vec::new(), format!("TOOL_ERROR: unknown tool {tool_name:?}"));
        }
        let Some(q) = arguments.get("query").and_then(|v| v.as_str()) else {
            return (
                Vec::new(),
                "TOOL_ERROR: search requires a string \"query\" argument".into(),
            );
        };
        match self.deps.search.search(q, self.cfg.doc_top_k) {
            Ok(results) => {
                let mut docs = results.documents;
                docs.truncate(self.cfg.doc_top_k);
                docs.retain(|d| !d.content.is_empty());
                for (i, d) in docs.iter_mut().enumerate() {
                    d.rank = i as u32 + 1;
                }
                let text = policy::format_documents(&docs);
                (docs, text)
            }
            Err(e) => (Vec::new(), format!("TOOL_ERROR: {e}")),
        }
    }

    /// One ReAct step given the sessions so far and any pending guidance.
    pub fn run_step(
        &self,
        query: &Query,
        history: &[Session],
        pending_delta: Option<&str>,
    ) -> Result<StepOutcome, BackendError> {
        let index = history.len() as u32 + 1;
        let guidance = pending_delta.map(|d| self.injection.render(&[("delta", d)]));
        let messages = build_messages(&self.cfg.system_prompt, query, history, guidance.as_deref());
        let mut request = ChatRequest::new(messages);
        if self.cfg.fast_monitor_enabled {
            request = request.with_logprobs(self.cfg.top_logprobs);
        }
        let response = self.deps.policy.chat(&request)?;

        let parsed = parse_policy_output(&response.text);
        let positions = response
            .token_logprobs
            .as_deref()
            .map(|p| policy::reasoning_positions(p, parsed.action_offset))
            .unwrap_or_default();
        let (action, documents, observation) = match parsed.action {
            ParsedAction::Action(action) => {
                let (docs, obs) = self.execute_tool(&action);
                (action, docs, obs)
            }
            ParsedAction::Invalid { action, error } => (action, Vec::new(), error),
        };
        let mut session = Session {
            index,
            reasoning_text: parsed.reasoning,
            reasoning_token_logprobs: positions,
            action,
            documents,
            tool_observation: observation,
            signals: None,
            critique: None,
            injected_guidance: guidance,
        };

        if self.cfg.fast_monitor_enabled && !session.documents.is_empty() {
            let calibration = self.calibration.as_ref().expect("checked in Agent::new");
            match compute_signals(
                &session,
                self.deps.embedder.as_ref(),
                calibration,
                &self.cfg.cluster,
            ) {
                Ok(s) => session.signals = Some(s),
                Err(e) => log::warn!("query {} step {index}: signals unavailable: {e}", query.id),
            }
        }

        let flagged = session.signals.map(|s| s.anomaly).unwrap_or(false);
        let mut critic_calls = 0;
        let mut critic_failure = None;
        let mut next_delta = None;
        if flagged && self.cfg.slow_monitor_enabled {
            let snapshot = SessionSnapshot::from_session(&query.text, &session);
            let hits = self
                .deps
                .memory
                .read()
                .retrieve(&snapshot, self.deps.embedder.as_ref(), self.cfg.k_per_pool)
                .unwrap_or_else(|e| {
                    log::warn!("experience retrieval failed: {e}");
                    Default::default()
                });
            let verdict = self.deps.critic.criticize(
                self.deps.critic_chat.as_ref(),
                &snapshot.text(),
                &hits,
                &history_digest(history),
            );
            critic_calls = verdict.calls;
            critic_failure = verdict.failure;
            next_delta = verdict.critique.delta().map(str::to_string);
            session.critique = Some(verdict.critique);
        }

        let memory_insert = if self.cfg.online_memory_enabled {
            self.insert_online(query, &session, history, flagged)
        } else {
            None
        };

        let terminal = session.action.is_terminate() || index >= self.cfg.max_steps;
        Ok(StepOutcome {
            injected_delta: pending_delta.map(str::to_string),
            session,
            next_delta,
            terminal,
            critic_calls,
            critic_failure,
            memory_insert,
        })
    }

    fn insert_online(
        &self,
        query: &Query,
        session: &Session,
        history: &[Session],
        flagged: bool,
    ) -> Option<InsertOutcome> {
        let abstractor = self.deps.abstractor.as_ref()?;
        let label = label_online(flagged, session.critique.as_ref());
        let outcome = match label {
            crate::trajectory::OutcomeLabel::Success => Outcome::Success,
            crate::trajectory::OutcomeLabel::Failure => Outcome::Failure,
        };
        let ctx = EntryContext {
            trajectory_id: &query.id,
            query_text: &query.text,
            origin: Origin::Online,
            created_at: (self.deps.clock)(),
        };
        let result = build_entry(
            &ctx,
            session,
            history,
            outcome,
            abstractor.as_ref(),
            self.deps.embedder.as_ref(),
        )
        .and_then(|entry| self.deps.memory.write().insert(entry));
        match result {
            Ok(o) => Some(o),
            Err(e) => {
                log::warn!("online memory update skipped: {e}");
                None
            }
        }
    }

    fn run_inner(&self, query: &Query) -> (Trajectory, u32) {
        let mut sessions: Vec<Session> = Vec::new();
        let mut pending: Option<String> = None;
        let mut budget = self.cfg.max_steps;
        let mut critic_calls = 0;
        let termination = loop {
            let step = match self.run_step(query, &sessions, pending.as_deref()) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("query {}: policy backend failed: {e}", query.id);
                    break Termination::BackendError;
                }
            };
            critic_calls += step.critic_calls;
            pending = step.next_delta;
            let done = step.session.action.is_terminate();
            sessions.push(step.session);
            if done {
                break Termination::Answered;
            }
            if sessions.len() as u32 >= budget {
                if self.cfg.extra_step_on_terminal_anomaly
                    && pending.is_some()
                    && budget == self.cfg.max_steps
                {
                    budget += 1;
                    continue;
                }
                break Termination::MaxStepsExceeded;
            }
        };
        let mut trajectory = Trajectory {
            query: query.clone(),
            sessions,
            outcome: Outcome::Unknown,
            termination,
            run: Some(self.header()),
        };
        trajectory.outcome = judge_exact(query, trajectory.final_answer());
        (trajectory, critic_calls)
    }

    /// Run one query to completion. Never fails: backend errors end the
    /// trajectory with `Termination::BackendError`. The log is written to
    /// `log_dir` when configured.
    pub fn run_trajectory(&self, query: &Query) -> Trajectory {
        let (trajectory, _) = self.run_inner(query);
        if let Some(dir) = &self.cfg.log_dir {
            if let Err(e) = write_log(&trajectory, dir) {
                log::warn!("could not write log for {}: {e}", query.id);
            }
        }
        trajectory
    }
}

#[cfg(test)]
mod tests;
