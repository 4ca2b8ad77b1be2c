use std::sync::Arc;

use serde_json::Value;

use super::build::history_digest;
use super::{Abstraction, MemoryError, SessionSnapshot};
use crate::backends::{ChatBackend, ChatRequest, Message, Role};
use crate::critic::json_objects;
use crate::template::{Template, TemplateError};
use crate::trajectory::{OutcomeLabel, Session};

pub const SUCCESS_TEMPLATE_ID: &str = "success-abstraction";
pub const FAILURE_TEMPLATE_ID: &str = "failure-abstraction";

pub const DEFAULT_SUCCESS_TEMPLATE: &str = include_str!("../../templates/success_abstraction.txt");
pub const DEFAULT_FAILURE_TEMPLATE: &str = include_str!("../../templates/failure_abstraction.txt");
pub const DEFAULT_HISTORY_TEMPLATE: &str = include_str!("../../templates/history_summary.txt");

pub const ABSTRACTION_SLOTS: &[&str] = &["session", "history"];
pub const HISTORY_SLOTS: &[&str] = &["steps"];

/// Produces history summaries and label-conditioned abstractions.
pub trait AbstractionBackend: Send + Sync {
    fn summarize_history(&self, query: &str, history: &[Session]) -> Result<String, MemoryError>;

    /// Returns the abstraction and the id of the template that produced it.
    fn abstract_session(
        &self,
        snapshot: &SessionSnapshot,
        history_summary: &str,
        label: OutcomeLabel,
    ) -> Result<(Abstraction, String), MemoryError>;
}

/// Model-free abstractor: deterministic text derived from the session itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateAbstractor;

impl AbstractionBackend for TemplateAbstractor {
    fn summarize_history(&self, _query: &str, history: &[Session]) -> Result<String, MemoryError> {
        Ok(history_digest(history))
    }

    fn abstract_session(
        &self,
        snapshot: &SessionSnapshot,
        _history_summary: &str,
        label: OutcomeLabel,
    ) -> Result<(Abstraction, String), MemoryError> {
        let evidence: String = snapshot.observation.chars().take(200).collect();
        let (pattern, insight, id) = match label {
            OutcomeLabel::Success => (
                format!("Productive step: {}", snapshot.action),
                format!("Reasoning \"{}\" led to a useful action.", snapshot.reasoning),
                SUCCESS_TEMPLATE_ID,
            ),
            OutcomeLabel::Failure => (
                format!("Step in a failed search: {}", snapshot.action),
                format!(
                    "Verify the evidence behind \"{}\" before committing to it.",
                    snapshot.reasoning
                ),
                FAILURE_TEMPLATE_ID,
            ),
        };
        Ok((
            Abstraction {
                behavior_pattern: pattern,
                evidence,
                insight,
            },
            id.to_string(),
        ))
    }
}

/// Abstractor backed by a chat model and the configurable prompt templates.
pub struct LlmAbstractor {
    chat: Arc<dyn ChatBackend>,
    success: Template,
    failure: Template,
    history: Template,
    attempts: u32,
    pub max_tokens: usize,
}

impl LlmAbstractor {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        success: &str,
        failure: &str,
        history: &str,
    ) -> Result<Self, TemplateError> {
        Ok(Self {
            chat,
            success: Template::parse(SUCCESS_TEMPLATE_ID, success, ABSTRACTION_SLOTS, &["session"])?,
            failure: Template::parse(FAILURE_TEMPLATE_ID, failure, ABSTRACTION_SLOTS, &["session"])?,
            history: Template::parse("history-summary", history, HISTORY_SLOTS, &["steps"])?,
            attempts: 2,
            max_tokens: 1024,
        })
    }

    pub fn with_defaults(chat: Arc<dyn ChatBackend>) -> Self {
        Self::new(
            chat,
            DEFAULT_SUCCESS_TEMPLATE,
            DEFAULT_FAILURE_TEMPLATE,
            DEFAULT_HISTORY_TEMPLATE,
        )
        .expect("built-in abstraction templates are valid")
    }

    fn ask(&self, prompt: String) -> Result<String, String> {
        let mut request = ChatRequest::new(vec![Message::new(Role::User, prompt)]);
        request.max_tokens = self.max_tokens;
        self.chat
            .chat(&request)
            .map(|r| r.text)
            .map_err(|e| e.to_string())
    }
}

fn field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    obj.get(key)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_string()
}

impl AbstractionBackend for LlmAbstractor {
    fn summarize_history(&self, _query: &str, history: &[Session]) -> Result<String, MemoryError> {
        let prompt = self.history.render(&[("steps", &history_digest(history))]);
        let mut last = String::from("no attempt made");
        for _ in 0..self.attempts {
            match self.ask(prompt.clone()) {
                Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
                Ok(_) => last = "empty summary".into(),
                Err(e) => last = e,
            }
        }
        Err(MemoryError::AbstractionFailed(last))
    }

    fn abstract_session(
        &self,
        snapshot: &SessionSnapshot,
        history_summary: &str,
        label: OutcomeLabel,
    ) -> Result<(Abstraction, String), MemoryError> {
        let template = match label {
            OutcomeLabel::Success => &self.success,
            OutcomeLabel::Failure => &self.failure,
        };
        let prompt = template.render(&[("session", &snapshot.text()), ("history", history_summary)]);
        let mut last = String::from("no attempt made");
        for _ in 0..self.attempts {
            match self.ask(prompt.clone()) {
                Ok(text) => {
                    let parsed = json_objects(&text).into_iter().find_map(|obj| {
                        let a = Abstraction {
                            behavior_pattern: field(&obj, "behavior_pattern"),
                            evidence: field(&obj, "evidence"),
                            insight: field(&obj, "insight"),
                        };
                        (!a.is_empty()).then_some(a)
                    });
                    match parsed {
                        Some(a) => return Ok((a, template.name().to_string())),
                        None => last = format!("unparseable abstraction: {text:.200}"),
                    }
                }
                Err(e) => last = e,
            }
        }
        Err(MemoryError::AbstractionFailed(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptRule, ScriptedChat, ScriptedResponse};

    fn snapshot() -> SessionSnapshot {
        SessionSnapshot {
            query: "q".into(),
            reasoning: "r".into(),
            action: "search(x)".into(),
            observation: "o".into(),
        }
    }

    #[test]
    fn llm_abstractor_uses_label_template() {
        let chat = Arc::new(ScriptedChat::new(vec![
            ScriptRule::respond(ScriptedResponse::text(
                "```json\n{\"behavior_pattern\": \"premature closure\", \"evidence\": \"e\", \"insight\": \"verify\"}\n```",
            ))
            .containing("failed to answer its question"),
            ScriptRule::respond(ScriptedResponse::text(
                "{\"behavior_pattern\": \"good\", \"evidence\": \"e\", \"insight\": \"keep\"}",
            )),
        ]));
        let abstractor = LlmAbstractor::with_defaults(chat.clone());
        let (a, id) = abstractor
            .abstract_session(&snapshot(), "none", OutcomeLabel::Failure)
            .unwrap();
        assert_eq!(a.behavior_pattern, "premature closure");
        assert_eq!(id, FAILURE_TEMPLATE_ID);
        let (a, id) = abstractor
            .abstract_session(&snapshot(), "none", OutcomeLabel::Success)
            .unwrap();
        assert_eq!(a.insight, "keep");
        assert_eq!(id, SUCCESS_TEMPLATE_ID);
    }

    #[test]
    fn llm_abstractor_gives_up_after_retries() {
        let chat = Arc::new(ScriptedChat::new(vec![ScriptRule::respond(
            ScriptedResponse::text("I refuse."),
        )]));
        let abstractor = LlmAbstractor::with_defaults(chat.clone());
        let err = abstractor
            .abstract_session(&snapshot(), "none", OutcomeLabel::Success)
            .unwrap_err();
        assert!(matches!(err, MemoryError::AbstractionFailed(_)));
        assert_eq!(chat.requests().len(), 2);
    }
}
