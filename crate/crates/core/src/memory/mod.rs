//! Assistant memory architectures: raw long context, raw-round retrieval,
//! extracted-fact retrieval, and an in-context fact map.

mod index;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::arena::{AgentError, AssistantHandle, Evaluation};
use crate::backend::prompts::{
    numbered_options, ASSISTANT_RESPOND, ASSISTANT_SYSTEM, EVAL_OVERALL, EVAL_PROBE, EVAL_UTILIZATION,
    MEMORY_EXTRACT_AWE, MEMORY_UPDATE_AWI,
};
use crate::backend::{
    complete_json, complete_with_retry, extract_json, BackendError, ChatBackend, ChatRequest, EmbeddingBackend,
    PromptRegistry, RetryPolicy,
};
use crate::model::{EvaluationQuestion, Message, Role, StateAssignment, StateSchema};

pub use index::{cosine, retrieve_topk, IndexEntry, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("vector has dimension {got}, index expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid agent config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Llm,
    Rag,
    Awe,
    Awi,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Llm => "llm",
            AgentKind::Rag => "rag",
            AgentKind::Awe => "awe",
            AgentKind::Awi => "awi",
        }
    }

    fn uses_embeddings(self) -> bool {
        matches!(self, AgentKind::Rag | AgentKind::Awe)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = MemoryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(AgentKind::Llm),
            "rag" => Ok(AgentKind::Rag),
            "awe" => Ok(AgentKind::Awe),
            "awi" => Ok(AgentKind::Awi),
            other => Err(MemoryError::Config(format!("unknown agent kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// Rounds between memory updates.
    pub freq: usize,
    /// Rounds that always stay in context.
    pub ns: usize,
    /// Retrieved memories per query.
    pub topk: usize,
    /// Generation model descriptor, recorded in traces.
    pub model: String,
    /// Context budget for the raw-context kind, in estimated tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context_tokens: Option<usize>,
}

impl AgentConfig {
    /// Defaults per kind: (2, 4, 30) for the memory kinds.
    pub fn new(kind: AgentKind) -> Self {
        AgentConfig {
            kind,
            freq: 2,
            ns: 4,
            topk: 30,
            model: String::new(),
            max_context_tokens: None,
        }
    }

    pub fn with_params(mut self, freq: usize, ns: usize, topk: usize) -> Self {
        self.freq = freq;
        self.ns = ns;
        self.topk = topk;
        self
    }

    pub fn check(&self) -> Result<(), MemoryError> {
        if self.freq == 0 {
            return Err(MemoryError::Config("freq must be at least 1".into()));
        }
        Ok(())
    }

    /// `awe-(2,4,30)` style label; `llm` has no parameters.
    pub fn descriptor(&self) -> String {
        match self.kind {
            AgentKind::Llm => "llm".into(),
            k => format!("{k}-({},{},{})", self.freq, self.ns, self.topk),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Round {
    user: String,
    assistant: String,
}

impl Round {
    fn render(&self) -> String {
        format!("User: {}\nAssistant: {}", self.user, self.assistant)
    }
}

/// Counters exposed for tests and logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AgentStats {
    pub rounds: usize,
    pub update_cycles: usize,
    pub write_calls: usize,
    pub write_failures: usize,
    pub overflow_events: usize,
}

/// One assistant with its memory, behind [`AssistantHandle`].
pub struct MemoryAgent {
    cfg: AgentConfig,
    chat: Arc<dyn ChatBackend>,
    embed: Option<Arc<dyn EmbeddingBackend>>,
    prompts: Arc<PromptRegistry>,
    retry: RetryPolicy,
    /// Rounds not yet written to long-term memory.
    short: Vec<Round>,
    /// Full history, kept by the raw-context kind only.
    transcript: Vec<Round>,
    index: VectorIndex,
    facts: BTreeMap<String, String>,
    since_update: usize,
    stats: AgentStats,
}

fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

impl MemoryAgent {
    pub fn new(
        cfg: AgentConfig,
        chat: Arc<dyn ChatBackend>,
        embed: Option<Arc<dyn EmbeddingBackend>>,
        prompts: Arc<PromptRegistry>,
    ) -> Result<Self, MemoryError> {
        cfg.check()?;
        let dim = match (&embed, cfg.kind.uses_embeddings()) {
            (Some(e), true) => e.dimension(),
            (None, true) => {
                return Err(MemoryError::Config(format!("{} needs an embedding backend", cfg.kind)));
            }
            _ => 0,
        };
        let embed = if cfg.kind.uses_embeddings() { embed } else { None };
        Ok(MemoryAgent {
            cfg,
            chat,
            embed,
            prompts,
            retry: RetryPolicy::default(),
            short: Vec::new(),
            transcript: Vec::new(),
            index: VectorIndex::new(dim),
            facts: BTreeMap::new(),
            since_update: 0,
            stats: AgentStats::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn stats(&self) -> AgentStats {
        self.stats
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn facts(&self) -> &BTreeMap<String, String> {
        &self.facts
    }

    /// Rounds currently held in context (not yet written out).
    pub fn short_term_len(&self) -> usize {
        self.short.len()
    }

    fn render(&self, tag: &str, pairs: &[(&str, String)]) -> Result<String, AgentError> {
        let map: BTreeMap<&str, String> = pairs.iter().cloned().collect();
        Ok(self.prompts.render(tag, &map)?)
    }

    fn preamble(&self) -> Result<Message, AgentError> {
        Ok(Message::system(self.render(ASSISTANT_SYSTEM, &[])?))
    }

    fn rounds_as_messages(rounds: &[Round]) -> impl Iterator<Item = Message> + '_ {
        rounds
            .iter()
            .flat_map(|r| [Message::user(r.user.clone()), Message::assistant(r.assistant.clone())])
    }

    /// Raw-context history that fits the token budget, oldest rounds dropped first.
    fn budgeted_transcript(&self, reserve: usize) -> (&[Round], bool) {
        let Some(budget) = self.cfg.max_context_tokens else {
            return (&self.transcript, false);
        };
        let mut used = reserve;
        let mut start = self.transcript.len();
        while start > 0 {
            let r = &self.transcript[start - 1];
            let cost = estimate_tokens(&r.user) + estimate_tokens(&r.assistant);
            if used + cost > budget {
                break;
            }
            used += cost;
            start -= 1;
        }
        (&self.transcript[start..], start > 0)
    }

    /// Long-term memories relevant to `query`, in the order they were written.
    fn recall(&self, query: &str) -> Result<Vec<String>, AgentError> {
        match self.cfg.kind {
            AgentKind::Llm => Ok(Vec::new()),
            AgentKind::Awi => Ok(self.facts.iter().map(|(k, v)| format!("{k}: {v}")).collect()),
            AgentKind::Rag | AgentKind::Awe => {
                let Some(embed) = &self.embed else {
                    return Ok(Vec::new());
                };
                if self.cfg.topk == 0 || self.index.is_empty() {
                    return Ok(Vec::new());
                }
                let q = embed
                    .embed(&[query.to_string()])?
                    .pop()
                    .ok_or_else(|| MemoryError::Embedding("empty embedding response".into()))?;
                let mut hits: Vec<&IndexEntry> = self
                    .index
                    .search(&q, self.cfg.topk)
                    .into_iter()
                    .map(|(e, _)| e)
                    .collect();
                hits.sort_by_key(|e| e.id);
                Ok(hits.into_iter().map(|e| e.text.clone()).collect())
            }
        }
    }

    fn memory_block(&self, memories: &[String]) -> Option<Message> {
        if memories.is_empty() {
            return None;
        }
        let header = match self.cfg.kind {
            AgentKind::Awi => "Current memories about the user:",
            _ => "Relevant memories about the user:",
        };
        let body = memories.iter().map(|m| format!("- {m}")).collect::<Vec<_>>().join("\n");
        Some(Message::system(format!("{header}\n{body}")))
    }

    /// Preamble, memory block and short-term rounds, in that order, plus
    /// the memories that were surfaced.
    fn context(&self, query: &str, final_msg: &str) -> Result<(Vec<Message>, Vec<String>, bool), AgentError> {
        let mut messages = vec![self.preamble()?];
        let mut overflow = false;
        let memories = self.recall(query)?;
        if self.cfg.kind == AgentKind::Llm {
            let reserve = estimate_tokens(&messages[0].content) + estimate_tokens(final_msg);
            let (rounds, cut) = self.budgeted_transcript(reserve);
            overflow = cut;
            messages.extend(Self::rounds_as_messages(rounds));
        } else {
            messages.extend(self.memory_block(&memories));
            messages.extend(Self::rounds_as_messages(&self.short));
        }
        messages.push(Message::user(final_msg.to_string()));
        Ok((messages, memories, overflow))
    }

    fn push_round(&mut self, round: Round) -> Result<(), AgentError> {
        self.stats.rounds += 1;
        if self.cfg.kind == AgentKind::Llm {
            self.transcript.push(round);
            return Ok(());
        }
        self.short.push(round);
        self.since_update += 1;
        if self.since_update >= self.cfg.freq {
            self.since_update = 0;
            self.update_memory()?;
        }
        Ok(())
    }

    /// One write cycle over the rounds beyond the newest `ns`.
    pub fn update_memory(&mut self) -> Result<(), AgentError> {
        self.stats.update_cycles += 1;
        let flushable = self.short.len().saturating_sub(self.cfg.ns);
        if flushable == 0 || self.cfg.kind == AgentKind::Llm {
            return Ok(());
        }
        let rounds: Vec<Round> = self.short[..flushable].to_vec();
        let written = match self.cfg.kind {
            AgentKind::Rag => {
                let chunks: Vec<String> = rounds.iter().map(Round::render).collect();
                self.add_to_index(chunks)?;
                true
            }
            AgentKind::Awe => self.extract_facts(&rounds)?,
            AgentKind::Awi => self.update_fact_map(&rounds)?,
            AgentKind::Llm => true,
        };
        if written {
            self.short.drain(..flushable);
        }
        Ok(())
    }

    fn add_to_index(&mut self, texts: Vec<String>) -> Result<(), AgentError> {
        let mut fresh: Vec<String> = Vec::new();
        for t in texts {
            if !t.trim().is_empty() && !self.index.contains_text(&t) && !fresh.contains(&t) {
                fresh.push(t);
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let embed = self
            .embed
            .as_ref()
            .ok_or_else(|| MemoryError::Config("no embedding backend".into()))?;
        let vectors = embed.embed(&fresh)?;
        if vectors.len() != fresh.len() {
            return Err(MemoryError::Embedding(format!("{} vectors for {} texts", vectors.len(), fresh.len())).into());
        }
        for (t, v) in fresh.into_iter().zip(vectors) {
            self.index.insert(t, v)?;
        }
        Ok(())
    }

    fn conversation(rounds: &[Round]) -> String {
        rounds.iter().map(Round::render).collect::<Vec<_>>().join("\n")
    }

    fn write_request(&mut self, tag: &str, pairs: &[(&str, String)]) -> Result<Option<Value>, AgentError> {
        let prompt = self.render(tag, pairs)?;
        self.stats.write_calls += 1;
        match complete_json(self.chat.as_ref(), &ChatRequest::user(tag, prompt), &self.retry) {
            Ok(v) => Ok(Some(v)),
            Err(BackendError::Json { .. }) => {
                self.stats.write_failures += 1;
                tracing::warn!(tag, "memory write reply unparsable; rounds kept for the next cycle");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn extract_facts(&mut self, rounds: &[Round]) -> Result<bool, AgentError> {
        let Some(reply) = self.write_request(MEMORY_EXTRACT_AWE, &[("conversation", Self::conversation(rounds))])?
        else {
            return Ok(false);
        };
        let list = match &reply {
            Value::Array(a) => a.clone(),
            other => other["facts"].as_array().cloned().unwrap_or_default(),
        };
        let facts: Vec<String> = list
            .iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .collect();
        self.add_to_index(facts)?;
        Ok(true)
    }

    fn update_fact_map(&mut self, rounds: &[Round]) -> Result<bool, AgentError> {
        let current = serde_json::to_string_pretty(&self.facts).unwrap_or_default();
        let Some(reply) = self.write_request(
            MEMORY_UPDATE_AWI,
            &[
                ("current_memories", current),
                ("conversation", Self::conversation(rounds)),
            ],
        )?
        else {
            return Ok(false);
        };
        merge_facts(&mut self.facts, &reply);
        Ok(true)
    }

    fn ask(&self, tag: &str, messages: Vec<Message>) -> Result<String, AgentError> {
        Ok(complete_with_retry(self.chat.as_ref(), &ChatRequest::new(tag, messages), &self.retry)?.text)
    }
}

/// `current |= update` over string values; non-string or empty values are ignored.
pub fn merge_facts(current: &mut BTreeMap<String, String>, update: &Value) {
    if let Some(map) = update.as_object() {
        for (k, v) in map {
            let text = match v {
                Value::String(s) => s.trim().to_string(),
                Value::Null => continue,
                other => other.to_string(),
            };
            if !text.is_empty() {
                current.insert(k.clone(), text);
            }
        }
    }
}

/// Zero-based choice from an `{"answer": n}` reply with 1-based options.
pub fn parse_choice(reply: &str, n_options: usize) -> Option<usize> {
    let v = extract_json(reply).ok()?;
    let n = match &v["answer"] {
        Value::Number(n) => n.as_i64()?,
        Value::String(s) => s.trim().parse().ok()?,
        _ => return None,
    };
    (1..=n_options as i64).contains(&n).then(|| (n - 1) as usize)
}

/// Legal value per schema variable from a probe reply.
pub fn parse_probe(reply: &str, schema: &StateSchema) -> BTreeMap<String, Option<String>> {
    let v = extract_json(reply).unwrap_or(Value::Null);
    schema
        .variables
        .iter()
        .map(|var| {
            let pick = v[&var.name]
                .as_str()
                .map(str::trim)
                .filter(|s| var.choices.iter().any(|c| c == s))
                .map(str::to_string);
            (var.name.clone(), pick)
        })
        .collect()
}

impl AssistantHandle for MemoryAgent {
    fn descriptor(&self) -> String {
        if self.cfg.model.is_empty() {
            self.cfg.descriptor()
        } else {
            format!("{}@{}", self.cfg.descriptor(), self.cfg.model)
        }
    }

    fn respond(&mut self, user_msg: &str) -> Result<String, AgentError> {
        let (messages, _, overflow) = self.context(user_msg, user_msg)?;
        if overflow {
            self.stats.overflow_events += 1;
            tracing::warn!("context budget exceeded; oldest rounds dropped");
        }
        let reply = self.ask(ASSISTANT_RESPOND, messages)?.trim().to_string();
        self.push_round(Round {
            user: user_msg.to_string(),
            assistant: reply.clone(),
        })?;
        Ok(reply)
    }

    fn evaluate(&self, question: &EvaluationQuestion, options: &[String]) -> Result<Evaluation, AgentError> {
        let prompt = self.render(
            EVAL_OVERALL,
            &[("query", question.text.clone()), ("choices", numbered_options(options))],
        )?;
        let (messages, retrieved, _) = self.context(&question.text, &prompt)?;
        let reply = self.ask(EVAL_OVERALL, messages)?;
        Ok(Evaluation {
            choice: parse_choice(&reply, options.len()),
            retrieved,
        })
    }

    fn probe(&self, schema: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError> {
        let schema_json = serde_json::to_string_pretty(&schema.choices_json()).unwrap_or_default();
        let prompt = self.render(EVAL_PROBE, &[("state_schema", schema_json)])?;
        let (messages, _, _) = self.context(&prompt, &prompt)?;
        let reply = self.ask(EVAL_PROBE, messages)?;
        Ok(parse_probe(&reply, schema))
    }

    fn evaluate_with_truth(
        &self,
        question: &EvaluationQuestion,
        options: &[String],
        truth: &StateAssignment,
    ) -> Result<Option<usize>, AgentError> {
        let state = serde_json::to_string_pretty(&truth.0).unwrap_or_default();
        let prompt = self.render(
            EVAL_UTILIZATION,
            &[
                ("query", question.text.clone()),
                ("state", state),
                ("choices", numbered_options(options)),
            ],
        )?;
        let messages = vec![self.preamble()?, Message::user(prompt)];
        let reply = self.ask(EVAL_UTILIZATION, messages)?;
        Ok(parse_choice(&reply, options.len()))
    }

    fn ingest_replay(&mut self, messages: &[Message]) -> Result<(), AgentError> {
        let mut pending: Option<String> = None;
        for m in messages {
            match m.role {
                Role::User => {
                    if let Some(user) = pending.take() {
                        self.push_round(Round {
                            user,
                            assistant: String::new(),
                        })?;
                    }
                    pending = Some(m.content.clone());
                }
                Role::Assistant => {
                    let user = pending.take().unwrap_or_default();
                    self.push_round(Round {
                        user,
                        assistant: m.content.clone(),
                    })?;
                }
                Role::System => {}
            }
        }
        if let Some(user) = pending {
            self.push_round(Round {
                user,
                assistant: String::new(),
            })?;
        }
        Ok(())
    }

    fn memory_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        match self.cfg.kind {
            AgentKind::Llm => {
                for r in &self.transcript {
                    h.update(r.render().as_bytes());
                    h.update([0]);
                }
            }
            AgentKind::Rag | AgentKind::Awe => {
                for e in self.index.entries() {
                    h.update(e.id.to_le_bytes());
                    h.update(e.text.as_bytes());
                    h.update([0]);
                    for x in &e.vector {
                        h.update(x.to_le_bytes());
                    }
                }
            }
            AgentKind::Awi => {
                for (k, v) in &self.facts {
                    h.update(k.as_bytes());
                    h.update([0]);
                    h.update(v.as_bytes());
                    h.update([0]);
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn memory_dump(&self) -> Value {
        let store = match self.cfg.kind {
            AgentKind::Llm => json!(self.transcript.iter().map(Round::render).collect::<Vec<_>>()),
            AgentKind::Rag | AgentKind::Awe => json!(self
                .index
                .entries()
                .iter()
                .map(|e| json!({"id": e.id, "text": e.text}))
                .collect::<Vec<_>>()),
            AgentKind::Awi => json!(self.facts),
        };
        json!({
            "agent": self.cfg.descriptor(),
            "store": store,
            "short_term": self.short.iter().map(Round::render).collect::<Vec<_>>(),
        })
    }
}

/// Text of the long-term store, as used by the factual-recall checker.
pub fn memory_document(dump: &Value) -> String {
    match &dump["store"] {
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| format!("{k}: {}", v.as_str().unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("\n"),
        Value::Array(items) => items
            .iter()
            .map(|i| i["text"].as_str().or(i.as_str()).unwrap_or_default().to_string())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

#[cfg(test)]
mod tests;
