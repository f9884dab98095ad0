use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no JSON object or array found in completion: {raw:?}")]
pub struct JsonExtractError {
    pub raw: String,
}

fn structured(v: Value) -> Option<Value> {
    matches!(v, Value::Object(_) | Value::Array(_)).then_some(v)
}

/// First complete JSON object or array in a completion: raw JSON, a fenced
/// block, or JSON embedded in prose.
pub fn extract_json(completion: &str) -> Result<Value, JsonExtractError> {
    let trimmed = completion.trim();
    if let Some(v) = serde_json::from_str(trimmed).ok().and_then(structured) {
        return Ok(v);
    }

    let mut rest = trimmed;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else { break };
        let inner = after[..close].trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(v) = serde_json::from_str(inner.trim()).ok().and_then(structured) {
            return Ok(v);
        }
        rest = &after[close + 3..];
    }

    for (i, c) in trimmed.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&trimmed[i..]).into_iter::<Value>();
        if let Some(v) = stream.next().and_then(Result::ok).and_then(structured) {
            return Ok(v);
        }
    }

    Err(JsonExtractError {
        raw: completion.to_string(),
    })
}

/// First integer in a completion, for prompts that ask for a bare number.
pub fn extract_integer(completion: &str) -> Option<i64> {
    let start = completion.find(|c: char| c.is_ascii_digit())?;
    let digits: String = completion[start..].chars().take_while(char::is_ascii_digit).collect();
    let value: i64 = digits.parse().ok()?;
    let negative = completion[..start].ends_with('-');
    Some(if negative { -value } else { value })
}
