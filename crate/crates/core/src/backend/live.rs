//! OpenAI-compatible HTTP client for chat completions and embeddings.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, EmbeddingBackend};
use crate::model::Role;

pub const ENV_API_KEY: &str = "AMEMGYM_API_KEY";
pub const ENV_BASE_URL: &str = "AMEMGYM_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout_s: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: DEFAULT_BASE_URL.into(),
            api_key: None,
            chat_model: "gpt-4.1-mini".into(),
            embed_model: "text-embedding-3-small".into(),
            embed_dim: 1536,
            timeout_s: 120,
        }
    }
}

impl LiveConfig {
    /// Fills the key (and the base URL, when set) from the environment.
    pub fn from_env(mut self) -> Self {
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            self.api_key = Some(key);
        }
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.trim().is_empty() {
                self.base_url = url;
            }
        }
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageOut,
}

#[derive(Deserialize)]
struct ChatMessageOut {
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    index: usize,
    embedding: Vec<f32>,
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveBackend")
            .field("base_url", &self.config.base_url)
            .field("chat_model", &self.config.chat_model)
            .field("has_api_key", &self.config.api_key.is_some())
            .finish()
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::System => "system",
    }
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s.max(1)))
            .build()
            .map_err(|e| BackendError::Transport(format!("failed to build HTTP client: {e}")))?;
        Ok(LiveBackend { config, client })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let mut req = self.client.post(self.config.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(2000).collect(),
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed(format!("{e}: {}", text.chars().take(500).collect::<String>())))
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.check()?;
        let body = ChatBody {
            model: &self.config.chat_model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: role_name(m.role),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let resp: ChatResponse = self.post("chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("response has no message content".into()))
    }

    fn descriptor(&self) -> String {
        format!("openai-compatible:{}", self.config.chat_model)
    }
}

impl EmbeddingBackend for LiveBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp: EmbedResponse = self.post(
            "embeddings",
            &EmbedBody {
                model: &self.config.embed_model,
                input: texts,
            },
        )?;
        let mut items = resp.data;
        items.sort_by_key(|i| i.index);
        if items.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "{} embeddings for {} inputs",
                items.len(),
                texts.len()
            )));
        }
        if let Some(bad) = items.iter().find(|i| i.embedding.len() != self.config.embed_dim) {
            return Err(BackendError::Malformed(format!(
                "embedding dimension {} (configured {})",
                bad.embedding.len(),
                self.config.embed_dim
            )));
        }
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }

    fn dimension(&self) -> usize {
        self.config.embed_dim
    }

    fn descriptor(&self) -> String {
        format!("openai-compatible:{}", self.config.embed_model)
    }
}
