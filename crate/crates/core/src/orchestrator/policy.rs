//! Prompt assembly for the policy model and parsing of its replies.

use serde_json::{Map, Value};

use crate::backends::{Message, Role, TokenPosition};
use crate::trajectory::{Action, Query, RetrievedDocument, Session, TokenCandidate};

pub const DEFAULT_POLICY_SYSTEM: &str = include_str!("../../templates/policy_system.txt");
pub const DEFAULT_INJECTION_TEMPLATE: &str = include_str!("../../templates/injection.txt");

pub const SEARCH_TOOL: &str = "search";
pub const MALFORMED_TOOL: &str = "malformed_tool_call";
pub const MISSING_TOOL: &str = "none";

/// The built-in system prompt with its brace escapes resolved.
pub fn default_system_prompt() -> String {
    crate::template::Template::parse("policy_system", DEFAULT_POLICY_SYSTEM, &[], &[])
        .expect("built-in policy prompt is valid")
        .render(&[])
}

const TOOL_OPEN: &str = "<tool_call>";
const TOOL_CLOSE: &str = "</tool_call>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// What the policy asked for, before any tool runs.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAction {
    Action(Action),
    /// Unusable action; the session records `action` and `error` becomes the observation.
    Invalid { action: Action, error: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedStep {
    pub reasoning: String,
    pub action: ParsedAction,
    /// Byte offset where the action markup begins.
    pub action_offset: usize,
}

fn strip_think(text: &str) -> String {
    text.replace("<think>", "").replace("</think>", "").trim().to_string()
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> &'a str {
    let body = &text[open.len()..];
    match body.find(close) {
        Some(end) => &body[..end],
        None => body,
    }
}

fn parse_tool_call(body: &str) -> ParsedAction {
    let invalid = |error: String| {
        let mut arguments = Map::new();
        arguments.insert("raw".into(), Value::String(body.trim().to_string()));
        ParsedAction::Invalid {
            action: Action::ToolCall {
                tool_name: MALFORMED_TOOL.into(),
                arguments,
            },
            error,
        }
    };
    let value: Value = match serde_json::from_str(body.trim()) {
        Ok(v) => v,
        Err(e) => return invalid(format!("TOOL_ERROR: malformed tool call: {e}")),
    };
    let Some(name) = value.get("name").and_then(Value::as_str) else {
        return invalid("TOOL_ERROR: tool call has no \"name\"".into());
    };
    let arguments = match value.get("arguments") {
        Some(Value::Object(m)) => m.clone(),
        None | Some(Value::Null) => Map::new(),
        Some(_) => return invalid("TOOL_ERROR: tool call arguments must be an object".into()),
    };
    ParsedAction::Action(Action::ToolCall {
        tool_name: name.to_string(),
        arguments,
    })
}

/// Split a policy reply into reasoning and action. Reasoning is everything
/// before the first `<tool_call>` or `<answer>` tag.
pub fn parse_policy_output(text: &str) -> ParsedStep {
    let tool = text.find(TOOL_OPEN);
    let answer = text.find(ANSWER_OPEN);
    let offset = match (tool, answer) {
        (Some(t), Some(a)) => t.min(a),
        (Some(t), None) => t,
        (None, Some(a)) => a,
        (None, None) => {
            return ParsedStep {
                reasoning: strip_think(text),
                action: ParsedAction::Invalid {
                    action: Action::ToolCall {
                        tool_name: MISSING_TOOL.into(),
                        arguments: Map::new(),
                    },
                    error: "TOOL_ERROR: no <tool_call> or <answer> found in the reply".into(),
                },
                action_offset: text.len(),
            }
        }
    };
    let rest = &text[offset..];
    let action = if Some(offset) == answer {
        ParsedAction::Action(Action::Terminate {
            final_answer: between(rest, ANSWER_OPEN, ANSWER_CLOSE).trim().to_string(),
        })
    } else {
        parse_tool_call(between(rest, TOOL_OPEN, TOOL_CLOSE))
    };
    ParsedStep {
        reasoning: strip_think(&text[..offset]),
        action,
        action_offset: offset,
    }
}

/// Logprob positions whose token starts before `offset`.
pub fn reasoning_positions(positions: &[TokenPosition], offset: usize) -> Vec<Vec<TokenCandidate>> {
    let mut start = 0;
    let mut out = Vec::new();
    for p in positions {
        if start >= offset {
            break;
        }
        out.push(p.top.clone());
        start += p.token.len();
    }
    out
}

/// Canonical markup for a past action, as the policy would have written it.
pub fn render_action(action: &Action) -> String {
    match action {
        Action::ToolCall {
            tool_name,
            arguments,
        } => {
            let mut call = Map::new();
            call.insert("name".into(), Value::String(tool_name.clone()));
            call.insert("arguments".into(), Value::Object(arguments.clone()));
            format!("{TOOL_OPEN}{}{TOOL_CLOSE}", Value::Object(call))
        }
        Action::Terminate { final_answer } => format!("{ANSWER_OPEN}{final_answer}{ANSWER_CLOSE}"),
    }
}

pub fn render_observation(observation: &str) -> String {
    format!("<tool_response>\n{observation}\n</tool_response>")
}

/// Text returned to the policy for a set of search results.
pub fn format_documents(documents: &[RetrievedDocument]) -> String {
    if documents.is_empty() {
        return "No results found.".into();
    }
    documents
        .iter()
        .map(|d| {
            if d.title.is_empty() {
                format!("[{}] {}", d.rank, d.content)
            } else {
                format!("[{}] {}\n{}", d.rank, d.title, d.content)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Messages for the next policy call. Earlier guidance is not replayed: each
/// critique conditions exactly one step.
pub fn build_messages(
    system: &str,
    query: &Query,
    history: &[Session],
    guidance: Option<&str>,
) -> Vec<Message> {
    let mut messages = vec![
        Message::new(Role::System, system),
        Message::new(Role::User, format!("Question: {}", query.text)),
    ];
    for s in history {
        let assistant = if s.reasoning_text.is_empty() {
            render_action(&s.action)
        } else {
            format!("<think>\n{}\n</think>\n{}", s.reasoning_text, render_action(&s.action))
        };
        messages.push(Message::new(Role::Assistant, assistant));
        if !s.action.is_terminate() {
            messages.push(Message::new(Role::Tool, render_observation(&s.tool_observation)));
        }
    }
    if let Some(text) = guidance {
        messages.push(Message::new(Role::Monitor, text));
    }
    messages
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::split_tokens;

    #[test]
    fn splits_reasoning_and_search() {
        let text = "<think>Need the year.</think>\n<tool_call>{\"name\": \"search\", \"arguments\": {\"query\": \"eiffel tower\"}}</tool_call>";
        let step = parse_policy_output(text);
        assert_eq!(step.reasoning, "Need the year.");
        match step.action {
            ParsedAction::Action(Action::ToolCall { tool_name, arguments }) => {
                assert_eq!(tool_name, "search");
                assert_eq!(arguments["query"], "eiffel tower");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_terminates() {
        let step = parse_policy_output("<think>Done.</think><answer> 1889 </answer>");
        assert_eq!(
            step.action,
            ParsedAction::Action(Action::Terminate {
                final_answer: "1889".into()
            })
        );
    }

    #[test]
    fn malformed_and_missing_actions() {
        let step = parse_policy_output("<think>x</think><tool_call>{oops</tool_call>");
        match step.action {
            ParsedAction::Invalid { action, error } => {
                assert_eq!(action.tool_name(), Some(MALFORMED_TOOL));
                assert!(error.starts_with("TOOL_ERROR"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let step = parse_policy_output("I am not sure what to do.");
        assert_eq!(step.reasoning, "I am not sure what to do.");
        assert!(matches!(
            step.action,
            ParsedAction::Invalid { ref action, .. } if action.tool_name() == Some(MISSING_TOOL)
        ));
    }

    #[test]
    fn reasoning_positions_stop_at_action() {
        let text = "<think>a b</think> <answer>c</answer>";
        let positions: Vec<TokenPosition> = split_tokens(text)
            .into_iter()
            .map(|t| TokenPosition {
                token: t.to_string(),
                top: vec![TokenCandidate::new(t, 0.0)],
            })
            .collect();
        let step = parse_policy_output(text);
        let kept = reasoning_positions(&positions, step.action_offset);
        let tokens: Vec<_> = kept.iter().map(|p| p[0].token.as_str()).collect();
        assert_eq!(tokens, vec!["<think>a ", "b", "</think> "]);
    }

    #[test]
    fn rendered_action_parses_back() {
        let text = "<think>r</think><tool_call>{\"name\":\"search\",\"arguments\":{\"query\":\"q\"}}</tool_call>";
        let step = parse_policy_output(text);
        let ParsedAction::Action(action) = step.action else {
            panic!("expected an action")
        };
        let again = parse_policy_output(&render_action(&action));
        assert_eq!(again.action, ParsedAction::Action(action));
    }
}
