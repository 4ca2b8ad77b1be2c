//! Minimal `{slot}` templates. `{{` and `}}` render literal braces.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {name}: unclosed '{{' at byte {at}")]
    Unclosed { name: String, at: usize },
    #[error("template {name}: stray '}}' at byte {at}")]
    Stray { name: String, at: usize },
    #[error("template {name}: unknown slot {{{slot}}} (allowed: {allowed})")]
    UnknownSlot {
        name: String,
        slot: String,
        allowed: String,
    },
    #[error("template {name}: required slot {{{slot}}} is missing")]
    MissingSlot { name: String, slot: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

impl Template {
    /// Parse and check that every slot is in `allowed` and every `required` slot occurs.
    pub fn parse(
        name: &str,
        source: &str,
        allowed: &[&str],
        required: &[&str],
    ) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let bytes = source.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    text.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    text.push('}');
                    i += 2;
                }
                b'{' => {
                    let end = source[i + 1..]
                        .find('}')
                        .ok_or_else(|| TemplateError::Unclosed {
                            name: name.into(),
                            at: i,
                        })?;
                    let slot = &source[i + 1..i + 1 + end];
                    if !allowed.contains(&slot) {
                        return Err(TemplateError::UnknownSlot {
                            name: name.into(),
                            slot: slot.into(),
                            allowed: allowed.join(", "),
                        });
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(slot.to_string()));
                    i += end + 2;
                }
                b'}' => {
                    return Err(TemplateError::Stray {
                        name: name.into(),
                        at: i,
                    })
                }
                _ => {
                    let ch = source[i..].chars().next().expect("in bounds");
                    text.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let template = Self {
            name: name.into(),
            pieces,
        };
        let used = template.slots();
        for slot in required {
            if !used.contains(*slot) {
                return Err(TemplateError::MissingSlot {
                    name: name.into(),
                    slot: (*slot).into(),
                });
            }
        }
        Ok(template)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    /// Fill slots from `values`; a slot with no value renders empty.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    if let Some((_, v)) = values.iter().find(|(k, _)| k == s) {
                        out.push_str(v);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_slots_and_escapes() {
        let t = Template::parse("x", "A {delta} {{\"k\": 1}}", &["delta"], &["delta"]).unwrap();
        assert_eq!(t.render(&[("delta", "go")]), "A go {\"k\": 1}");
    }

    #[test]
    fn rejects_unknown_and_missing_slots() {
        assert!(matches!(
            Template::parse("x", "{nope}", &["delta"], &[]),
            Err(TemplateError::UnknownSlot { .. })
        ));
        assert!(matches!(
            Template::parse("x", "plain", &["delta"], &["delta"]),
            Err(TemplateError::MissingSlot { .. })
        ));
        assert!(matches!(
            Template::parse("x", "oops {delta", &["delta"], &[]),
            Err(TemplateError::Unclosed { .. })
        ));
        assert!(matches!(
            Template::parse("x", "a } b", &[], &[]),
            Err(TemplateError::Stray { .. })
        ));
    }

    #[test]
    fn unicode_text_survives() {
        let t = Template::parse("x", "δ → {delta}", &["delta"], &[]).unwrap();
        assert_eq!(t.render(&[("delta", "ok")]), "δ → ok");
    }
}
