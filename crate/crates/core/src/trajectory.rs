//! Queries, sessions and trajectories, plus the line-delimited log format.
//!
//! A trajectory log is UTF-8 text with one JSON record per line. Line 1 is a
//! header carrying the query and the trajectory-level outcome; every following
//! line is one session. Unknown fields are ignored on read.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::calibration::CalibrationModel;
use crate::critic::Critique;
use crate::signals::{MassWeighting, UncertaintySignals};

pub const LOG_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory has no sessions")]
    EmptyTrajectory,
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    ToolCall {
        tool_name: String,
        arguments: serde_json::Map<String, serde_json::Value>,
    },
    Terminate {
        final_answer: String,
    },
}

impl Action {
    pub fn is_terminate(&self) -> bool {
        matches!(self, Action::Terminate { .. })
    }

    pub fn tool_name(&self) -> Option<&str> {
        match self {
            Action::ToolCall { tool_name, .. } => Some(tool_name),
            Action::Terminate { .. } => None,
        }
    }

    /// One-line human readable descriptor, used in snapshots and digests.
    pub fn descriptor(&self) -> String {
        match self {
            Action::ToolCall {
                tool_name,
                arguments,
            } => format!(
                "{}({})",
                tool_name,
                serde_json::Value::Object(arguments.clone())
            ),
            Action::Terminate { final_answer } => format!("answer({final_answer})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDocument {
    pub doc_id: String,
    pub title: String,
    pub content: String,
    pub rank: u32,
}

impl RetrievedDocument {
    /// Text handed to the embedding backend.
    pub fn embedding_text(&self) -> String {
        if self.title.is_empty() {
            self.content.clone()
        } else {
            format!("{}\n{}", self.title, self.content)
        }
    }
}

/// One top-K alternative at a generation position. Serialized as
/// `[token, logprob]`; a logprob of `-inf` is written as `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCandidate {
    pub token: String,
    pub logprob: f64,
}

impl TokenCandidate {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

impl Serialize for TokenCandidate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(&self.token)?;
        let lp = if self.logprob.is_finite() {
            Some(self.logprob)
        } else {
            None
        };
        tup.serialize_element(&lp)?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for TokenCandidate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = TokenCandidate;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [token, logprob] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let token: String = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let lp: Option<f64> = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(TokenCandidate {
                    token,
                    logprob: lp.unwrap_or(f64::NEG_INFINITY),
                })
            }
        }
        deserializer.deserialize_tuple(2, PairVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub index: u32,
    pub reasoning_text: String,
    pub reasoning_token_logprobs: Vec<Vec<TokenCandidate>>,
    pub action: Action,
    pub documents: Vec<RetrievedDocument>,
    pub tool_observation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<UncertaintySignals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<Critique>,
    /// Monitor guidance that was present in this step's prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_guidance: Option<String>,
}

impl Session {
    pub fn is_retrieval(&self) -> bool {
        !self.documents.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Unknown,
}

impl Outcome {
    pub fn label(self) -> Option<OutcomeLabel> {
        match self {
            Outcome::Success => Some(OutcomeLabel::Success),
            Outcome::Failure => Some(OutcomeLabel::Failure),
            Outcome::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxStepsExceeded,
    BackendError,
    Aborted,
}

/// Binary outcome label attached to sessions and memory entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutcomeLabel {
    Failure = 0,
    Success = 1,
}

impl OutcomeLabel {
    pub fn value(self) -> u8 {
        self as u8
    }
}

impl Serialize for OutcomeLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.value())
    }
}

impl<'de> Deserialize<'de> for OutcomeLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match u8::deserialize(deserializer)? {
            0 => Ok(OutcomeLabel::Failure),
            1 => Ok(OutcomeLabel::Success),
            other => Err(de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// Monitor settings the trajectory was produced under. Written into the log
/// header so that replays and audits do not depend on out-of-band config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub max_steps: u32,
    pub doc_top_k: usize,
    pub k_per_pool: usize,
    pub anomaly_k: f64,
    pub top_logprobs: usize,
    pub d_merge: f64,
    #[serde(default)]
    pub mass_weighting: MassWeighting,
    pub fast_monitor_enabled: bool,
    pub slow_monitor_enabled: bool,
    pub online_memory_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: Query,
    pub sessions: Vec<Session>,
    pub outcome: Outcome,
    pub termination: Termination,
    pub run: Option<RunHeader>,
}

impl Trajectory {
    pub fn final_answer(&self) -> Option<&str> {
        match self.sessions.last().map(|s| &s.action) {
            Some(Action::Terminate { final_answer }) => Some(final_answer),
            _ => None,
        }
    }

    /// Check every type invariant of the trajectory and its sessions.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let violation = |m: String| Err(TrajectoryError::SchemaViolation(m));
        if self.query.text.is_empty() {
            return violation("query text is empty".into());
        }
        let n = self.sessions.len();
        for (pos, s) in self.sessions.iter().enumerate() {
            let expected = pos as u32 + 1;
            if s.index != expected {
                return violation(format!(
                    "session indices must be contiguous from 1: expected {expected}, found {}",
                    s.index
                ));
            }
            if s.action.is_terminate() && pos + 1 != n {
                return violation(format!(
                    "session {} terminates but is not the last session",
                    s.index
                ));
            }
            validate_session(s)?;
        }
        Ok(())
    }
}

pub fn validate_session(s: &Session) -> Result<(), TrajectoryError> {
    let violation = |m: String| Err(TrajectoryError::SchemaViolation(m));
    if s.index == 0 {
        return violation("session index must be >= 1".into());
    }
    if !s.documents.is_empty() && s.action.is_terminate() {
        return violation(format!(
            "session {} has documents but its action is not a tool call",
            s.index
        ));
    }
    if s.signals.is_some() && s.documents.is_empty() {
        return violation(format!(
            "session {} has signals but no documents",
            s.index
        ));
    }
    for (i, d) in s.documents.iter().enumerate() {
        if d.rank as usize != i + 1 {
            return violation(format!(
                "session {}: document ranks must be contiguous from 1",
                s.index
            ));
        }
        if d.content.is_empty() {
            return violation(format!(
                "session {}: document {} has empty content",
                s.index, d.doc_id
            ));
        }
    }
    Ok(())
}

/// Pair every session with the trajectory-level outcome.
pub fn propagate_label(
    trajectory: &Trajectory,
    outcome: OutcomeLabel,
) -> Result<Vec<(&Session, OutcomeLabel)>, TrajectoryError> {
    if trajectory.sessions.is_empty() {
        return Err(TrajectoryError::EmptyTrajectory);
    }
    Ok(trajectory.sessions.iter().map(|s| (s, outcome)).collect())
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    schema_version: String,
    query_id: String,
    query_text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    query_metadata: BTreeMap<String, String>,
    outcome: Outcome,
    termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RunHeader>,
}

/// Render a trajectory as log text: one header line, then one line per session.
pub fn serialize_trajectory(trajectory: &Trajectory) -> String {
    let header = HeaderRecord {
        schema_version: LOG_SCHEMA_VERSION.to_string(),
        query_id: trajectory.query.id.clone(),
        query_text: trajectory.query.text.clone(),
        query_metadata: trajectory.query.metadata.clone(),
        outcome: trajectory.outcome,
        termination: trajectory.termination,
        run: trajectory.run.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &trajectory.sessions {
        out.push_str(&serde_json::to_string(s).expect("session serializes"));
        out.push('\n');
    }
    out
}

pub fn deserialize_trajectory(text: &str) -> Result<Trajectory, TrajectoryError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(TrajectoryError::ParseError {
            line: 1,
            message: "missing header record".into(),
        });
    }
    let mut lines = body.split('\n').enumerate();
    let (_, first) = lines.next().expect("non-empty body has a line");
    let header: HeaderRecord =
        serde_json::from_str(first.trim_end_matches('\r')).map_err(|e| {
            TrajectoryError::ParseError {
                line: 1,
                message: e.to_string(),
            }
        })?;
    if header.schema_version != LOG_SCHEMA_VERSION {
        return Err(TrajectoryError::SchemaViolation(format!(
            "unsupported schema_version {:?}",
            header.schema_version
        )));
    }
    let mut sessions = Vec::new();
    for (i, line) in lines {
        let session: Session = serde_json::from_str(line.trim_end_matches('\r')).map_err(|e| {
            TrajectoryError::ParseError {
                line: i + 1,
                message: e.to_string(),
            }
        })?;
        sessions.push(session);
    }
    let trajectory = Trajectory {
        query: Query {
            id: header.query_id,
            text: header.query_text,
            metadata: header.query_metadata,
        },
        sessions,
        outcome: header.outcome,
        termination: header.termination,
        run: header.run,
    };
    trajectory.validate()?;
    Ok(trajectory)
}
