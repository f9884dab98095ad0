//! Chat-completion and embedding providers.
//!
//! Two implementations sit behind the same traits: an OpenAI-compatible HTTP
//! client ([`live`]) and a deterministic rule-driven backend ([`scripted`]).
//! Both receive identical rendered prompts.

pub mod json;
pub mod live;
pub mod prompts;
pub mod scripted;
pub mod template;
pub mod world;

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::Message;

pub use json::{extract_integer, extract_json, JsonExtractError};
pub use prompts::PromptRegistry;
pub use template::{render_template, PromptTemplate, TemplateError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Which pipeline prompt this request renders.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            temperature: 0.0,
            max_tokens: 8192,
            tag: tag.into(),
        }
    }

    /// Single user message.
    pub fn user(tag: impl Into<String>, content: impl Into<String>) -> Self {
        Self::new(tag, vec![Message::user(content)])
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest(format!("{}: no messages", self.tag)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "{}: negative temperature",
                self.tag
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted rule matches tag {0:?}")]
    NoRule(String),
    #[error("request {tag:?} failed after {attempts} attempts: {last}")]
    Exhausted {
        tag: String,
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("request {tag:?} returned unparsable JSON: {raw:?}")]
    Json { tag: String, raw: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl BackendError {
    /// Transport failures, timeouts, rate limits and server errors are retried;
    /// auth and other client errors are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
    fn descriptor(&self) -> String;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
    fn dimension(&self) -> usize;
    fn descriptor(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

pub fn complete_with_retry(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<Completion, BackendError> {
    request.check()?;
    let max = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.complete(request) {
            Ok(text) => {
                return Ok(Completion {
                    text,
                    attempts: attempt,
                })
            }
            Err(e) if e.is_retryable() && attempt < max => {
                tracing::debug!(tag = %request.tag, attempt, error = %e, "retrying completion");
                std::thread::sleep(policy.delay(attempt));
            }
            Err(e) if e.is_retryable() => {
                return Err(BackendError::Exhausted {
                    tag: request.tag.clone(),
                    attempts: attempt,
                    last: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
}

pub const JSON_REPAIR_INSTRUCTION: &str = "Return only valid JSON.";

/// Completion parsed as JSON, with one re-ask on a parse failure.
pub fn complete_json(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<serde_json::Value, BackendError> {
    let first = complete_with_retry(backend, request, policy)?.text;
    if let Ok(v) = extract_json(&first) {
        return Ok(v);
    }
    let mut repair = request.clone();
    repair.messages.push(Message::assistant(first));
    repair.messages.push(Message::user(JSON_REPAIR_INSTRUCTION));
    let second = complete_with_retry(backend, &repair, policy)?.text;
    extract_json(&second).map_err(|e| BackendError::Json {
        tag: request.tag.clone(),
        raw: e.raw,
    })
}

/// Writes every prompt/response pair to a JSON-lines file.
pub struct LoggingBackend<B> {
    inner: B,
    sink: Mutex<File>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    tag: &'a str,
    messages: &'a [Message],
    response: Option<&'a str>,
    error: Option<String>,
}

impl<B: ChatBackend> LoggingBackend<B> {
    pub fn create(inner: B, path: &Path) -> std::io::Result<Self> {
        Ok(LoggingBackend {
            inner,
            sink: Mutex::new(File::create(path)?),
        })
    }
}

impl<B: ChatBackend> ChatBackend for LoggingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(request);
        let line = LogLine {
            tag: &request.tag,
            messages: &request.messages,
            response: result.as_ref().ok().map(String::as_str),
            error: result.as_ref().err().map(ToString::to_string),
        };
        if let Ok(mut f) = self.sink.lock() {
            let _ = serde_json::to_writer(&mut *f, &line);
            let _ = f.write_all(b"\n");
        }
        result
    }

    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: BackendError,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
        fn descriptor(&self) -> String {
            "flaky".into()
        }
    }

    fn flaky(failures: u32, error: BackendError) -> Flaky {
        Flaky {
            failures,
            calls: AtomicU32::new(0),
            error,
        }
    }

    #[test]
    fn scripted_single_attempt() {
        let b = scripted::ScriptedBackend::new(1).rule("t", |_, _| Ok("x".into()));
        let c = complete_with_retry(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(
            c,
            Completion {
                text: "x".into(),
                attempts: 1
            }
        );
    }

    #[test]
    fn succeeds_on_third_attempt() {
        let b = flaky(2, BackendError::Transport("reset".into()));
        let c = complete_with_retry(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(c.attempts, 3);
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhaustion_carries_tag() {
        let b = flaky(
            u32::MAX,
            BackendError::Status {
                status: 503,
                body: "busy".into(),
            },
        );
        let err = complete_with_retry(
            &b,
            &ChatRequest::user("sample_user_questions", "hi"),
            &RetryPolicy::immediate(2),
        )
        .unwrap_err();
        match err {
            BackendError::Exhausted { tag, attempts, .. } => {
                assert_eq!(tag, "sample_user_questions");
                assert_eq!(attempts, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let b = flaky(
            u32::MAX,
            BackendError::Status {
                status: 401,
                body: "bad key".into(),
            },
        );
        let err = complete_with_retry(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(5)).unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 401, .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let b = flaky(0, BackendError::Transport(String::new()));
        let empty = ChatRequest::new("t", vec![]);
        assert!(matches!(
            complete_with_retry(&b, &empty, &RetryPolicy::immediate(1)),
            Err(BackendError::InvalidRequest(_))
        ));
        let hot = ChatRequest::user("t", "x").with_temperature(-1.0);
        assert!(complete_with_retry(&b, &hot, &RetryPolicy::immediate(1)).is_err());
    }

    #[test]
    fn json_repair_reasks_once() {
        let b = scripted::ScriptedBackend::new(1).rule("t", |req, _| {
            if req.last_content() == JSON_REPAIR_INSTRUCTION {
                Ok("{\"ok\": true}".into())
            } else {
                Ok("not json".into())
            }
        });
        let v = complete_json(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(1)).unwrap();
        assert_eq!(v, serde_json::json!({"ok": true}));

        let never = scripted::ScriptedBackend::new(1).rule("t", |_, _| Ok("nope".into()));
        let err = complete_json(&never, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(1)).unwrap_err();
        assert!(matches!(err, BackendError::Json { ref raw, .. } if raw == "nope"));
    }
}
