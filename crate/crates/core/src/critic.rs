//! The critical model: evaluates a flagged step against retrieved success and
//! failure experiences and returns `(err, δ)`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{ChatBackend, ChatRequest, Message, Role};
use crate::memory::{Hit, RetrievalResult};
use crate::template::{Template, TemplateError};

pub const CRITIC_SLOTS: &[&str] = &[
    "session",
    "history_digest",
    "success_experiences",
    "failure_experiences",
];

pub const DEFAULT_CRITIC_TEMPLATE: &str = include_str!("../templates/critic.txt");
pub const DEFAULT_CRITIC_REMINDER: &str = include_str!("../templates/critic_reminder.txt");

/// Substituted when the critic reports an error without saying what to do.
pub const FALLBACK_DELTA: &str =
    "A cognitive error was detected at this step; re-examine the latest evidence before proceeding.";

/// Critic verdict. `err = false` never carries a suggestion and `err = true`
/// always carries a non-empty one; the constructor and deserializer enforce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CritiqueRecord", into = "CritiqueRecord")]
pub struct Critique {
    err: bool,
    delta: Option<String>,
    rationale: Option<String>,
    raw: String,
}

impl Critique {
    pub fn new(
        err: bool,
        suggestion: Option<String>,
        rationale: Option<String>,
        raw: impl Into<String>,
    ) -> Self {
        let delta = if err {
            Some(
                suggestion
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| FALLBACK_DELTA.to_string()),
            )
        } else {
            None
        };
        Self {
            err,
            delta,
            rationale: rationale.filter(|r| !r.trim().is_empty()),
            raw: raw.into(),
        }
    }

    /// The no-intervention verdict.
    pub fn clear(raw: impl Into<String>) -> Self {
        Self::new(false, None, None, raw)
    }

    pub fn err(&self) -> bool {
        self.err
    }

    pub fn delta(&self) -> Option<&str> {
        self.delta.as_deref()
    }

    pub fn rationale(&self) -> Option<&str> {
        self.rationale.as_deref()
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }
}

#[derive(Serialize, Deserialize)]
struct CritiqueRecord {
    err: u8,
    delta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<String>,
    #[serde(default)]
    raw: String,
}

impl TryFrom<CritiqueRecord> for Critique {
    type Error = String;

    fn try_from(r: CritiqueRecord) -> Result<Self, Self::Error> {
        match (r.err, &r.delta) {
            (0, None) => {}
            (0, Some(_)) => return Err("critique with err=0 must not carry a delta".into()),
            (1, Some(d)) if !d.trim().is_empty() => {}
            (1, _) => return Err("critique with err=1 must carry a non-empty delta".into()),
            (other, _) => return Err(format!("err must be 0 or 1, got {other}")),
        }
        Ok(Critique {
            err: r.err == 1,
            delta: r.delta,
            rationale: r.rationale,
            raw: r.raw,
        })
    }
}

impl From<Critique> for CritiqueRecord {
    fn from(c: Critique) -> Self {
        CritiqueRecord {
            err: u8::from(c.err),
            delta: c.delta,
            rationale: c.rationale,
            raw: c.raw,
        }
    }
}

/// Why a critic call degraded to the no-intervention verdict.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticFailure {
    /// Output could not be parsed, even after the format reminder.
    ParseFailure { attempts: u32 },
    Backend(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticVerdict {
    pub critique: Critique,
    pub failure: Option<CriticFailure>,
    /// Number of backend calls made.
    pub calls: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerdict {
    pub error: bool,
    pub suggestion: Option<String>,
    pub rationale: Option<String>,
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    out
}

/// Balanced `{...}` spans, skipping braces inside JSON strings.
fn brace_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
        let mut end = None;
        for (j, &b) in bytes.iter().enumerate().skip(i) {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(j) => {
                out.push(&text[i..=j]);
                i = j + 1;
            }
            None => break,
        }
    }
    out
}

fn as_flag(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => Some(false),
            Some(x) if x == 1.0 => Some(true),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn as_text(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// JSON objects embedded in model output: fenced blocks first, then bare
/// balanced-brace spans.
pub(crate) fn json_objects(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut candidates: Vec<&str> = fenced_blocks(text);
    candidates.extend(brace_objects(text));
    candidates
        .into_iter()
        .filter_map(|c| match serde_json::from_str(c.trim()) {
            Ok(Value::Object(obj)) => Some(obj),
            _ => None,
        })
        .collect()
}

/// Extract `{error, suggestion, rationale}` from free-form critic output.
/// Fenced blocks are preferred; otherwise the first parseable object wins.
pub fn parse_verdict(text: &str) -> Option<ParsedVerdict> {
    json_objects(text).into_iter().find_map(|obj| {
        let error = as_flag(obj.get("error").or_else(|| obj.get("err"))?)?;
        Some(ParsedVerdict {
            error,
            suggestion: as_text(obj.get("suggestion").or_else(|| obj.get("delta"))),
            rationale: as_text(obj.get("rationale")),
        })
    })
}

fn render_success(hits: &[Hit]) -> String {
    if hits.is_empty() {
        return "(none retrieved)".into();
    }
    hits.iter()
        .enumerate()
        .map(|(i, h)| {
            let a = &h.entry.abstraction;
            format!(
                "[S{}] similarity {:.3}\nBehaviour: {}\nEvidence: {}\nInsight: {}\nStep context: {}",
                i + 1,
                h.similarity,
                a.behavior_pattern,
                a.evidence,
                a.insight,
                h.entry.session_snapshot.action,
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_failure(hits: &[Hit]) -> String {
    if hits.is_empty() {
        return "(none retrieved)".into();
    }
    hits.iter()
        .enumerate()
        .map(|(i, h)| {
            let a = &h.entry.abstraction;
            format!(
                "[F{}] similarity {:.3}\nCorrective insight: {}\nError pattern: {}\nEvidence: {}\nStep context: {}",
                i + 1,
                h.similarity,
                a.insight,
                a.behavior_pattern,
                a.evidence,
                h.entry.session_snapshot.action,
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone)]
pub struct Critic {
    template: Template,
    reminder: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for Critic {
    fn default() -> Self {
        Self::new(DEFAULT_CRITIC_TEMPLATE, DEFAULT_CRITIC_REMINDER)
            .expect("built-in critic template is valid")
    }
}

impl Critic {
    pub fn new(template: &str, reminder: &str) -> Result<Self, TemplateError> {
        Ok(Self {
            template: Template::parse("critic", template, CRITIC_SLOTS, &["session"])?,
            reminder: reminder.trim().to_string(),
            temperature: 0.0,
            max_tokens: 1024,
        })
    }

    pub fn render_prompt(
        &self,
        session_text: &str,
        hits: &RetrievalResult,
        history_digest: &str,
    ) -> String {
        let success = render_success(&hits.success_hits);
        let failure = render_failure(&hits.failure_hits);
        let digest = if history_digest.is_empty() {
            "(no earlier steps)"
        } else {
            history_digest
        };
        self.template.render(&[
            ("session", session_text),
            ("history_digest", digest),
            ("success_experiences", &success),
            ("failure_experiences", &failure),
        ])
    }

    /// Ask the critic about a flagged step. Never fails: backend errors and
    /// twice-unparseable output both degrade to `err = 0`.
    pub fn criticize(
        &self,
        backend: &dyn ChatBackend,
        session_text: &str,
        hits: &RetrievalResult,
        history_digest: &str,
    ) -> CriticVerdict {
        let prompt = self.render_prompt(session_text, hits, history_digest);
        let mut messages = vec![Message::new(Role::User, prompt)];
        let mut calls = 0;
        let mut last_raw = String::new();
        for attempt in 0..2 {
            let mut request = ChatRequest::new(messages.clone());
            request.temperature = self.temperature;
            request.max_tokens = self.max_tokens;
            calls += 1;
            let raw = match backend.chat(&request) {
                Ok(r) => r.text,
                Err(e) => {
                    log::warn!("critic backend failed: {e}");
                    return CriticVerdict {
                        critique: Critique::clear(last_raw),
                        failure: Some(CriticFailure::Backend(e.to_string())),
                        calls,
                    };
                }
            };
            if let Some(v) = parse_verdict(&raw) {
                return CriticVerdict {
                    critique: Critique::new(v.error, v.suggestion, v.rationale, raw),
                    failure: None,
                    calls,
                };
            }
            if attempt == 0 {
                messages.push(Message::new(Role::Assistant, raw.clone()));
                messages.push(Message::new(Role::User, self.reminder.clone()));
            }
            last_raw = raw;
        }
        log::warn!("CriticParseFailure: critic output unparseable after {calls} attempts");
        CriticVerdict {
            critique: Critique::clear(last_raw),
            failure: Some(CriticFailure::ParseFailure { attempts: calls }),
            calls,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptRule, ScriptedChat, ScriptedResponse};

    fn scripted(outputs: &[&str]) -> ScriptedChat {
        // First call has one message; the retry carries the reminder.
        let mut rules = Vec::new();
        if let Some(second) = outputs.get(1) {
            rules.push(
                ScriptRule::respond(ScriptedResponse::text(*second)).containing("could not be parsed"),
            );
        }
        rules.push(ScriptRule::respond(ScriptedResponse::text(outputs[0])));
        ScriptedChat::new(rules)
    }

    fn run(outputs: &[&str]) -> CriticVerdict {
        Critic::default().criticize(
            &scripted(outputs),
            "step text",
            &RetrievalResult::default(),
            "",
        )
    }

    #[test]
    fn error_with_suggestion() {
        let v = run(&[r#"{"error": true, "suggestion": "re-verify the publication year before concluding"}"#]);
        assert!(v.critique.err());
        assert_eq!(
            v.critique.delta(),
            Some("re-verify the publication year before concluding")
        );
        assert!(v.failure.is_none());
    }

    #[test]
    fn no_error_strips_suggestion() {
        let v = run(&[r#"{"error": false, "suggestion": "ignore me"}"#]);
        assert!(!v.critique.err());
        assert_eq!(v.critique.delta(), None);
    }

    #[test]
    fn malformed_twice_fails_open() {
        let v = run(&["no json here", "still nothing"]);
        assert!(!v.critique.err());
        assert_eq!(v.critique.delta(), None);
        assert_eq!(v.failure, Some(CriticFailure::ParseFailure { attempts: 2 }));
        assert_eq!(v.critique.raw(), "still nothing");
    }

    #[test]
    fn retry_recovers() {
        let v = run(&["garbage", "```json\n{\"error\": 1, \"suggestion\": \"check dates\"}\n```"]);
        assert!(v.critique.err());
        assert_eq!(v.calls, 2);
    }

    #[test]
    fn error_without_suggestion_gets_fallback() {
        let v = run(&[r#"{"error": "yes"}"#]);
        assert_eq!(v.critique.delta(), Some(FALLBACK_DELTA));
    }

    #[test]
    fn fenced_block_with_prose() {
        let text = "Here is my verdict.\n```json\n{\"error\": true, \"suggestion\": \"use {braces}\", \"rationale\": \"r\"}\n```\nThanks.";
        let v = parse_verdict(text).unwrap();
        assert!(v.error);
        assert_eq!(v.suggestion.as_deref(), Some("use {braces}"));
        assert_eq!(v.rationale.as_deref(), Some("r"));
    }

    #[test]
    fn record_invariants_enforced_on_read() {
        assert!(serde_json::from_str::<Critique>(r#"{"err":0,"delta":"x","raw":""}"#).is_err());
        assert!(serde_json::from_str::<Critique>(r#"{"err":1,"delta":null,"raw":""}"#).is_err());
        assert!(serde_json::from_str::<Critique>(r#"{"err":2,"delta":null,"raw":""}"#).is_err());
        let c: Critique = serde_json::from_str(r#"{"err":1,"delta":"go","raw":"r"}"#).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"err":1,"delta":"go","raw":"r"}"#);
    }

    #[test]
    fn backend_failure_fails_open() {
        let chat = ScriptedChat::new(vec![ScriptRule {
            fail: Some("down".into()),
            ..Default::default()
        }]);
        let v = Critic::default().criticize(&chat, "s", &RetrievalResult::default(), "");
        assert!(!v.critique.err());
        assert!(matches!(v.failure, Some(CriticFailure::Backend(_))));
    }
}
