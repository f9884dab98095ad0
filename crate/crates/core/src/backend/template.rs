use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: unfilled slot {slot:?}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    Unbalanced { template: String, offset: usize },
    #[error("unknown prompt template {0:?}")]
    Unknown(String),
}

/// A prompt body with `{name}` slots. Literal braces are written doubled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn scan<'a>(id: &str, body: &'a str) -> Result<Vec<Piece<'a>>, TemplateError> {
    let bytes = body.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let unbalanced = |offset| TemplateError::Unbalanced {
        template: id.to_string(),
        offset,
    };
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Text(&body[start..i]));
                pieces.push(Piece::Brace(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = body[i + 1..].find('}').ok_or_else(|| unbalanced(i))? + i + 1;
                let name = &body[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                    return Err(unbalanced(i));
                }
                pieces.push(Piece::Text(&body[start..i]));
                pieces.push(Piece::Slot(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(unbalanced(i)),
            _ => i += 1,
        }
    }
    pieces.push(Piece::Text(&body[start..]));
    Ok(pieces)
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        PromptTemplate {
            id: id.into(),
            body: body.into(),
        }
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Result<Vec<String>, TemplateError> {
        let mut out: Vec<String> = Vec::new();
        for piece in scan(&self.id, &self.body)? {
            if let Piece::Slot(name) = piece {
                if !out.iter().any(|s| s == name) {
                    out.push(name.to_string());
                }
            }
        }
        Ok(out)
    }
}

/// Escapes literal text so it survives a later render unchanged.
pub fn escape_braces(text: &str) -> String {
    text.replace('{', "{{").replace('}', "}}")
}

pub fn render_template(template: &PromptTemplate, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let pieces = scan(&template.id, &template.body)?;
    let mut out = String::with_capacity(template.body.len());
    let mut used = Vec::new();
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot(name) => {
                let value = bindings.get(name).ok_or_else(|| TemplateError::MissingSlot {
                    template: template.id.clone(),
                    slot: name.to_string(),
                })?;
                out.push_str(value);
                used.push(name);
            }
        }
    }
    for name in bindings.keys() {
        if !used.contains(name) {
            tracing::warn!(template = %template.id, binding = %name, "unused template binding");
        }
    }
    Ok(out)
}

/// Shorthand for building a binding map from pairs.
pub fn bind<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_slots() {
        let t = PromptTemplate::new("t", "Hello {x}");
        assert_eq!(
            render_template(&t, &bind([("x", "world".into())])).unwrap(),
            "Hello world"
        );
    }

    #[test]
    fn missing_slot_names_it() {
        let t = PromptTemplate::new("t", "Hello {x}");
        let err = render_template(&t, &BTreeMap::new()).unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingSlot {
                template: "t".into(),
                slot: "x".into()
            }
        );
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn doubled_braces_are_literal() {
        let t = PromptTemplate::new("t", "{{\"answer\": {n}}}");
        assert_eq!(
            render_template(&t, &bind([("n", "2".into())])).unwrap(),
            "{\"answer\": 2}"
        );
        assert_eq!(t.slots().unwrap(), vec!["n".to_string()]);
    }

    #[test]
    fn unknown_binding_is_ignored() {
        let t = PromptTemplate::new("t", "plain");
        assert_eq!(render_template(&t, &bind([("extra", "v".into())])).unwrap(), "plain");
    }

    #[test]
    fn stray_brace_is_rejected() {
        let t = PromptTemplate::new("t", "a } b");
        assert!(matches!(
            render_template(&t, &BTreeMap::new()),
            Err(TemplateError::Unbalanced { .. })
        ));
        let t = PromptTemplate::new("t", "a { b");
        assert!(matches!(
            render_template(&t, &BTreeMap::new()),
            Err(TemplateError::Unbalanced { .. })
        ));
    }

    #[test]
    fn escaped_text_roundtrips() {
        let raw = "keep {this} and }} that";
        let t = PromptTemplate::new("t", format!("<{}>", escape_braces(raw)));
        assert_eq!(render_template(&t, &BTreeMap::new()).unwrap(), format!("<{raw}>"));
    }
}
