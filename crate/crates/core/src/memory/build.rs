use serde::{Deserialize, Serialize};

use super::{AbstractionBackend, MemoryEntry, MemoryError, Origin, Provenance};
use crate::backends::EmbeddingBackend;
use crate::critic::Critique;
use crate::trajectory::{Outcome, OutcomeLabel, Session};

/// History summary used for the first step of a trajectory.
pub const NO_PRIOR_STEPS: &str = "no prior steps";

/// Tool observations are condensed to this many characters in snapshots.
pub const OBSERVATION_SNAPSHOT_CHARS: usize = 1000;

const DIGEST_OBSERVATION_CHARS: usize = 160;

fn prefix_chars(text: &str, n: usize) -> String {
    text.chars().take(n).collect()
}

/// Structured session representation stored in memory and embedded for retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub query: String,
    pub reasoning: String,
    pub action: String,
    pub observation: String,
}

impl SessionSnapshot {
    pub fn from_session(query: &str, session: &Session) -> Self {
        Self {
            query: query.to_string(),
            reasoning: session.reasoning_text.clone(),
            action: session.action.descriptor(),
            observation: prefix_chars(&session.tool_observation, OBSERVATION_SNAPSHOT_CHARS),
        }
    }

    /// Deterministic text fed to the embedder.
    pub fn text(&self) -> String {
        format!(
            "Query: {}\nReasoning: {}\nAction: {}\nObservation: {}",
            self.query, self.reasoning, self.action, self.observation
        )
    }
}

/// One line per prior step: the action taken and the start of what it returned.
pub fn history_digest(history: &[Session]) -> String {
    history
        .iter()
        .map(|s| {
            let obs: String = prefix_chars(&s.tool_observation, DIGEST_OBSERVATION_CHARS)
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            if obs.is_empty() {
                format!("Step {}: {}.", s.index, s.action.descriptor())
            } else {
                format!("Step {}: {} -> {}", s.index, s.action.descriptor(), obs)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Where a new entry comes from.
#[derive(Debug, Clone)]
pub struct EntryContext<'a> {
    pub trajectory_id: &'a str,
    pub query_text: &'a str,
    pub origin: Origin,
    pub created_at: u64,
}

/// Convert one labeled session into a memory entry.
pub fn build_entry(
    ctx: &EntryContext<'_>,
    session: &Session,
    history: &[Session],
    outcome: Outcome,
    abstractor: &dyn AbstractionBackend,
    embedder: &dyn EmbeddingBackend,
) -> Result<MemoryEntry, MemoryError> {
    let label = outcome.label().ok_or(MemoryError::LabelRequired)?;
    let snapshot = SessionSnapshot::from_session(ctx.query_text, session);
    let history_summary = if history.is_empty() {
        NO_PRIOR_STEPS.to_string()
    } else {
        abstractor.summarize_history(ctx.query_text, history)?
    };
    let (abstraction, template_id) =
        abstractor.abstract_session(&snapshot, &history_summary, label)?;
    if abstraction.is_empty() {
        return Err(MemoryError::AbstractionFailed(
            "abstractor returned an empty abstraction".into(),
        ));
    }
    let vectors = embedder.embed(&[snapshot.text(), history_summary.clone()])?;
    let [session_vec, history_vec]: [_; 2] = vectors.try_into().map_err(|v: Vec<_>| {
        MemoryError::Backend(crate::backends::BackendError::Protocol(format!(
            "expected 2 embeddings, got {}",
            v.len()
        )))
    })?;
    if session_vec.dim() != history_vec.dim() {
        return Err(MemoryError::DimMismatch {
            expected: session_vec.dim(),
            found: history_vec.dim(),
        });
    }
    let suffix = match ctx.origin {
        Origin::Offline => "",
        Origin::Online => "@online",
    };
    Ok(MemoryEntry {
        entry_id: format!("{}#{}{}", ctx.trajectory_id, session.index, suffix),
        session_snapshot: snapshot,
        history_summary,
        abstraction,
        label,
        embedding: session_vec.add(&history_vec),
        provenance: Provenance {
            trajectory_id: ctx.trajectory_id.to_string(),
            session_index: session.index,
            created_at: ctx.created_at,
            origin: ctx.origin,
            template_id,
        },
    })
}

/// Online label for a completed session: failure only when the slow monitor
/// ran on a flagged step and reported an error.
pub fn label_online(fast_flagged: bool, critique: Option<&Critique>) -> OutcomeLabel {
    match (fast_flagged, critique) {
        (true, Some(c)) if c.err() => OutcomeLabel::Failure,
        _ => OutcomeLabel::Success,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EmbeddingBackend, HashEmbedder};
    use crate::memory::{Abstraction, TemplateAbstractor, FAILURE_TEMPLATE_ID, SUCCESS_TEMPLATE_ID};
    use crate::trajectory::{Action, Session};

    fn session(index: u32, obs: &str) -> Session {
        let mut args = serde_json::Map::new();
        args.insert("query".into(), format!("lookup {index}").into());
        Session {
            index,
            reasoning_text: format!("reasoning for step {index}"),
            reasoning_token_logprobs: vec![],
            action: Action::ToolCall {
                tool_name: "search".into(),
                arguments: args,
            },
            documents: vec![],
            tool_observation: obs.into(),
            signals: None,
            critique: None,
            injected_guidance: None,
        }
    }

    struct Fixed;

    impl AbstractionBackend for Fixed {
        fn summarize_history(&self, _: &str, _: &[Session]) -> Result<String, MemoryError> {
            Ok("summary".into())
        }
        fn abstract_session(
            &self,
            _: &SessionSnapshot,
            _: &str,
            label: OutcomeLabel,
        ) -> Result<(Abstraction, String), MemoryError> {
            let id = match label {
                OutcomeLabel::Success => SUCCESS_TEMPLATE_ID,
                OutcomeLabel::Failure => FAILURE_TEMPLATE_ID,
            };
            Ok((
                Abstraction {
                    behavior_pattern: "b".into(),
                    evidence: "e".into(),
                    insight: "i".into(),
                },
                id.into(),
            ))
        }
    }

    fn ctx() -> EntryContext<'static> {
        EntryContext {
            trajectory_id: "t1",
            query_text: "the query",
            origin: Origin::Offline,
            created_at: 0,
        }
    }

    #[test]
    fn embedding_is_sum_of_session_and_history() {
        let embedder = HashEmbedder::default();
        let s2 = session(2, "obs two");
        let entry = build_entry(
            &ctx(),
            &s2,
            &[session(1, "obs one")],
            Outcome::Success,
            &Fixed,
            &embedder,
        )
        .unwrap();
        let expected = embedder
            .vector(&SessionSnapshot::from_session("the query", &s2).text())
            .add(&embedder.vector("summary"));
        assert_eq!(entry.embedding, expected);
        assert_eq!(entry.label, OutcomeLabel::Success);
        assert_eq!(entry.entry_id, "t1#2");
    }

    #[test]
    fn first_session_uses_sentinel_history() {
        let embedder = HashEmbedder::default();
        let s1 = session(1, "obs");
        let entry = build_entry(&ctx(), &s1, &[], Outcome::Failure, &Fixed, &embedder).unwrap();
        assert_eq!(entry.history_summary, NO_PRIOR_STEPS);
        let expected = embedder
            .vector(&SessionSnapshot::from_session("the query", &s1).text())
            .add(&embedder.vector(NO_PRIOR_STEPS));
        assert_eq!(entry.embedding, expected);
        assert_eq!(entry.provenance.template_id, FAILURE_TEMPLATE_ID);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let err = build_entry(
            &ctx(),
            &session(1, "o"),
            &[],
            Outcome::Unknown,
            &Fixed,
            &HashEmbedder::default(),
        )
        .unwrap_err();
        assert!(matches!(err, MemoryError::LabelRequired));
    }

    #[test]
    fn template_abstractor_picks_template_by_label() {
        let embedder = HashEmbedder::default();
        let e = build_entry(
            &ctx(),
            &session(1, "o"),
            &[],
            Outcome::Failure,
            &TemplateAbstractor,
            &embedder,
        )
        .unwrap();
        assert_eq!(e.provenance.template_id, FAILURE_TEMPLATE_ID);
        assert!(!e.abstraction.insight.is_empty());
        assert_eq!(embedder.dim(), e.embedding.dim());
    }

    #[test]
    fn snapshot_truncates_observation() {
        let long = "x".repeat(5000);
        let snap = SessionSnapshot::from_session("q", &session(1, &long));
        assert_eq!(snap.observation.chars().count(), OBSERVATION_SNAPSHOT_CHARS);
    }

    #[test]
    fn online_labels() {
        let fail = Critique::new(true, Some("fix".into()), None, "");
        let ok = Critique::clear("");
        assert_eq!(label_online(true, Some(&fail)), OutcomeLabel::Failure);
        assert_eq!(label_online(false, None), OutcomeLabel::Success);
        assert_eq!(label_online(true, Some(&ok)), OutcomeLabel::Success);
        assert_eq!(label_online(true, None), OutcomeLabel::Success);
    }

    #[test]
    fn digest_has_one_line_per_step() {
        let d = history_digest(&[session(1, "first\nresult"), session(2, "")]);
        let lines: Vec<_> = d.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Step 1: search("));
        assert!(lines[0].ends_with("first result"));
    }
}
