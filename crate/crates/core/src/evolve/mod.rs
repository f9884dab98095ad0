//! Self-evolution of the in-context memory update prompt, and the
//! factual-recall score of a memory store.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::arena::{run_episode, ArenaError, AssistantHandle, Interaction, UserSimulator};
use crate::backend::prompts::{
    memory_update_body, DEFAULT_MEMORY_TYPES, FACTUAL_CONSISTENCY, MEMORY_UPDATE_AWI, SELF_EVOLUTION,
    SELF_EVOLUTION_SYSTEM, TYPES_SENTINEL_END, TYPES_SENTINEL_START,
};
use crate::backend::template::{bind, escape_braces, TemplateError};
use crate::backend::{
    complete_json, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, PromptRegistry, RetryPolicy,
};
use crate::memory::{memory_document, AgentConfig, AgentKind, MemoryAgent, MemoryError};
use crate::metrics::{aggregate_report, MetricsError};
use crate::model::{Blueprint, EpisodeTrace, Message, ReportBundle, StateAssignment};

#[derive(Debug, thiserror::Error)]
pub enum EvolveError {
    #[error("prompt has no mutable section between {TYPES_SENTINEL_START:?} and {TYPES_SENTINEL_END:?}")]
    Sentinels,
    #[error("factual recall needs at least one state claim")]
    NoClaims,
    #[error("evolution needs an in-context (awi) agent, got {0}")]
    AgentKind(AgentKind),
    #[error("evolution needs at least one cycle and one blueprint")]
    Empty,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cycle {cycle}: {source}")]
    Cycle {
        cycle: usize,
        #[source]
        source: Box<EvolveError>,
        /// Cycles finished before the failure.
        completed: Vec<CycleRecord>,
    },
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

const OPEN: &str = "\n";
const CLOSE: &str = "\n\n";

/// The memory update template `P_k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyPrompt {
    pub version: usize,
    /// Template body, braces escaped, as installed in the prompt registry.
    pub full_text: String,
    /// The types section exactly as it appears inside `full_text`.
    pub mutable_section: String,
    /// Change notes returned by the evolver for this version.
    #[serde(default)]
    pub changes: Vec<String>,
}

fn unescape_braces(text: &str) -> String {
    text.replace("{{", "{").replace("}}", "}")
}

impl PolicyPrompt {
    pub fn initial() -> Self {
        Self::from_template(0, memory_update_body(DEFAULT_MEMORY_TYPES)).expect("standard template has sentinels")
    }

    pub fn from_template(version: usize, full_text: String) -> Result<Self, EvolveError> {
        let (start, end) = section_bounds(&full_text)?;
        Ok(PolicyPrompt {
            version,
            mutable_section: full_text[start..end].to_string(),
            full_text,
            changes: Vec::new(),
        })
    }

    /// The types section as plain text, without template escaping.
    pub fn types_text(&self) -> String {
        unescape_braces(&self.mutable_section)
    }

    /// Text before and after the mutable section.
    pub fn exterior(&self) -> (&str, &str) {
        let (start, end) = section_bounds(&self.full_text).expect("checked at construction");
        (&self.full_text[..start], &self.full_text[end..])
    }

    /// sha256 over the text outside the mutable section.
    pub fn exterior_fingerprint(&self) -> String {
        let (head, tail) = self.exterior();
        let mut h = Sha256::new();
        h.update(head.as_bytes());
        h.update([0u8]);
        h.update(tail.as_bytes());
        hex::encode(h.finalize())
    }

    /// Next version with `types` spliced between the sentinels.
    pub fn splice(&self, types: &str, changes: Vec<String>) -> Result<Self, EvolveError> {
        let types = types.trim_matches('\n').trim_end();
        if types.contains(TYPES_SENTINEL_START.trim()) || types.contains(TYPES_SENTINEL_END.trim()) {
            return Err(EvolveError::Sentinels);
        }
        let (head, tail) = self.exterior();
        let section = escape_braces(types);
        Ok(PolicyPrompt {
            version: self.version + 1,
            full_text: format!("{head}{section}{tail}"),
            mutable_section: section,
            changes,
        })
    }

    /// Same text under the next version number.
    pub fn carried_forward(&self) -> Self {
        PolicyPrompt {
            version: self.version + 1,
            changes: Vec::new(),
            ..self.clone()
        }
    }
}

fn section_bounds(text: &str) -> Result<(usize, usize), EvolveError> {
    let open = format!("{TYPES_SENTINEL_START}{OPEN}");
    let start = text.find(&open).ok_or(EvolveError::Sentinels)? + open.len();
    let close = format!("{CLOSE}{TYPES_SENTINEL_END}");
    let end = start + text[start..].find(&close).ok_or(EvolveError::Sentinels)?;
    Ok((start, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    None,
    QuestionOnly,
    Complete,
}

impl std::str::FromStr for FeedbackMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FeedbackMode::None),
            "question_only" | "question-only" => Ok(FeedbackMode::QuestionOnly),
            "complete" => Ok(FeedbackMode::Complete),
            other => Err(format!(
                "unknown feedback mode {other:?} (none, question_only, complete)"
            )),
        }
    }
}

impl std::fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeedbackMode::None => "none",
            FeedbackMode::QuestionOnly => "question_only",
            FeedbackMode::Complete => "complete",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFeedback {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_memories: Option<Vec<String>>,
}

/// Environment feedback `F_k` for one cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeedbackSummary {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub question_answer_history: Vec<QuestionFeedback>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub user_information_updates: BTreeMap<String, String>,
}

impl FeedbackSummary {
    pub fn is_empty(&self) -> bool {
        self.question_answer_history.is_empty() && self.user_information_updates.is_empty()
    }

    pub fn extend(&mut self, other: FeedbackSummary) {
        self.question_answer_history.extend(other.question_answer_history);
        self.user_information_updates.extend(other.user_information_updates);
    }
}

fn letter(i: usize) -> String {
    char::from_u32('A' as u32 + i as u32)
        .map(String::from)
        .unwrap_or_else(|| (i + 1).to_string())
}

/// "Question: q;" followed by one "(A) option;" line per option.
pub fn format_question(text: &str, options: &[String]) -> String {
    let mut out = format!("Question: {text};");
    for (i, o) in options.iter().enumerate() {
        out.push_str(&format!("\n({}) {o};", letter(i)));
    }
    out
}

/// Values revealed over the episode: the initial state, then each period's
/// updates, latest value winning.
pub fn revealed_states(blueprint: &Blueprint) -> StateAssignment {
    let mut out = blueprint.initial_state.clone();
    for p in &blueprint.periods {
        for (k, v) in p.updates.iter() {
            out.insert(k, v);
        }
    }
    out
}

/// Feedback from all evaluated positions of one episode.
pub fn build_feedback(trace: &EpisodeTrace, blueprint: &Blueprint, mode: FeedbackMode) -> FeedbackSummary {
    if mode == FeedbackMode::None {
        return FeedbackSummary::default();
    }
    let complete = mode == FeedbackMode::Complete;
    let mut history = Vec::new();
    for p in &trace.periods {
        for e in &p.evaluations {
            let Some(q) = blueprint.question(e.question_id) else {
                tracing::warn!(
                    question = e.question_id,
                    "feedback skips a question missing from the blueprint"
                );
                continue;
            };
            let texts: Vec<String> = e
                .options
                .iter()
                .map(|k| q.variants.get(k).cloned().unwrap_or_default())
                .collect();
            history.push(QuestionFeedback {
                question: format_question(&q.text, &texts),
                assistant_response: complete.then(|| e.chosen.map(letter).unwrap_or_else(|| "N/A".into())),
                ground_truth: complete.then(|| letter(e.truth)),
                retrieved_memories: complete.then(|| e.retrieved.clone()),
            });
        }
    }
    let user_information_updates = if complete {
        revealed_states(blueprint).0
    } else {
        BTreeMap::new()
    };
    FeedbackSummary {
        question_answer_history: history,
        user_information_updates,
    }
}

#[derive(Deserialize)]
struct EvolverReply {
    new_types: String,
    #[serde(default)]
    changes: Vec<String>,
}

/// `P_{k+1} = G(P_k, F_k)`. Empty feedback returns the same text without a
/// model call; a failed step keeps the text of `P_k`.
pub fn evolve_prompt(
    current: &PolicyPrompt,
    feedback: &FeedbackSummary,
    backend: &dyn ChatBackend,
    prompts: &PromptRegistry,
    retry: &RetryPolicy,
) -> PolicyPrompt {
    if feedback.is_empty() {
        return current.carried_forward();
    }
    match try_evolve(current, feedback, backend, prompts, retry) {
        Ok(next) => next,
        Err(e) => {
            tracing::warn!(version = current.version, error = %e, "evolution step failed, keeping prompt");
            current.carried_forward()
        }
    }
}

fn try_evolve(
    current: &PolicyPrompt,
    feedback: &FeedbackSummary,
    backend: &dyn ChatBackend,
    prompts: &PromptRegistry,
    retry: &RetryPolicy,
) -> Result<PolicyPrompt, EvolveError> {
    let system = prompts.render(SELF_EVOLUTION_SYSTEM, &BTreeMap::new())?;
    let user = prompts.render(
        SELF_EVOLUTION,
        &bind([
            ("current_memory_types_section", current.types_text()),
            (
                "feedback_summary",
                serde_json::to_string_pretty(feedback).expect("feedback serializes"),
            ),
        ]),
    )?;
    let request = ChatRequest::new(SELF_EVOLUTION, vec![Message::system(system), Message::user(user)]);
    let reply: EvolverReply = serde_json::from_value(complete_json(backend, &request, retry)?)
        .map_err(|e| BackendError::Malformed(format!("{SELF_EVOLUTION}: {e}")))?;
    if reply.new_types.trim().is_empty() {
        return Err(BackendError::Malformed(format!("{SELF_EVOLUTION}: empty new_types")).into());
    }
    current.splice(&reply.new_types, reply.changes)
}

/// Per-claim judgments and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub blueprint_ref: String,
    pub claims: Vec<String>,
    pub judgments: Vec<bool>,
    pub score: f64,
}

/// Mean of binary judgments; `None` for an empty list.
pub fn recall_score(judgments: &[bool]) -> Option<f64> {
    if judgments.is_empty() {
        return None;
    }
    Some(judgments.iter().filter(|&&j| j).count() as f64 / judgments.len() as f64)
}

fn judgment(reply: &Value, i: usize) -> bool {
    reply
        .get((i + 1).to_string())
        .and_then(Value::as_str)
        .is_some_and(|s| s.trim().eq_ignore_ascii_case("yes"))
}

/// Fraction of "variable: value" claims the checker finds supported by `document`.
pub fn factual_recall(
    new_states: &StateAssignment,
    document: &str,
    backend: &dyn ChatBackend,
    prompts: &PromptRegistry,
    retry: &RetryPolicy,
) -> Result<RecallResult, EvolveError> {
    if new_states.is_empty() {
        return Err(EvolveError::NoClaims);
    }
    let claims: Vec<String> = new_states.iter().map(|(k, v)| format!("{k}: {v}")).collect();
    let numbered = claims
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let text = prompts.render(
        FACTUAL_CONSISTENCY,
        &bind([("document", document.to_string()), ("claims", numbered)]),
    )?;
    let reply = match complete_json(backend, &ChatRequest::user(FACTUAL_CONSISTENCY, text), retry) {
        Ok(v) => v,
        Err(BackendError::Json { raw, .. }) => {
            tracing::warn!(raw = %raw, "unparseable consistency reply, all claims unsupported");
            Value::Null
        }
        Err(e) => return Err(e.into()),
    };
    let judgments: Vec<bool> = (0..claims.len()).map(|i| judgment(&reply, i)).collect();
    Ok(RecallResult {
        blueprint_ref: String::new(),
        score: recall_score(&judgments).expect("claims are non-empty"),
        claims,
        judgments,
    })
}

/// Model backends used by the loop.
#[derive(Clone)]
pub struct EvolutionBackends {
    /// Drives the memory agent.
    pub agent: Arc<dyn ChatBackend>,
    pub embed: Option<Arc<dyn EmbeddingBackend>>,
    /// Plays the simulated user.
    pub user: Arc<dyn ChatBackend>,
    /// Rewrites the prompt and checks factual consistency.
    pub judge: Arc<dyn ChatBackend>,
}

#[derive(Debug, Clone)]
pub struct EvolutionConfig {
    pub agent: AgentConfig,
    pub cycles: usize,
    pub mode: FeedbackMode,
    pub seed: u64,
    pub retry: RetryPolicy,
}

/// Everything produced by cycle `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// `P_k`, the prompt the agent ran with.
    pub prompt: PolicyPrompt,
    /// `F_k`.
    pub feedback: FeedbackSummary,
    /// `P_{k+1}`.
    pub next: PolicyPrompt,
    /// One report per blueprint.
    pub reports: Vec<ReportBundle>,
    /// Recall of each agent's memory at the end of its episode.
    pub recall: Vec<RecallResult>,
}

impl CycleRecord {
    /// Memory score of the cycle averaged over blueprints that define one.
    pub fn mean_memory_score(&self) -> Option<f64> {
        let xs: Vec<f64> = self.reports.iter().filter_map(|r| r.aggregate.memory).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_recall(&self) -> Option<f64> {
        let xs: Vec<f64> = self.recall.iter().map(|r| r.score).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn run_cycle(
    k: usize,
    prompt: &PolicyPrompt,
    blueprints: &[Blueprint],
    cfg: &EvolutionConfig,
    backends: &EvolutionBackends,
    prompts: &PromptRegistry,
) -> Result<CycleRecord, EvolveError> {
    let registry = Arc::new(
        prompts
            .clone()
            .with_override(MEMORY_UPDATE_AWI, prompt.full_text.clone()),
    );
    let user = UserSimulator::new(backends.user.clone(), registry.clone()).with_retry(cfg.retry.clone());
    let mut feedback = FeedbackSummary::default();
    let mut reports = Vec::with_capacity(blueprints.len());
    let mut recall = Vec::with_capacity(blueprints.len());
    for bp in blueprints {
        let mut agent = MemoryAgent::new(
            cfg.agent.clone(),
            backends.agent.clone(),
            backends.embed.clone(),
            registry.clone(),
        )?
        .with_retry(cfg.retry.clone());
        let trace = run_episode(bp, &mut agent, Interaction::OnPolicy(&user), cfg.seed)?;
        reports.push(aggregate_report(&trace, bp)?);
        feedback.extend(build_feedback(&trace, bp, cfg.mode));
        let document = memory_document(&agent.memory_dump());
        let mut r = factual_recall(
            &revealed_states(bp),
            &document,
            backends.judge.as_ref(),
            prompts,
            &cfg.retry,
        )?;
        r.blueprint_ref = bp.id.clone();
        recall.push(r);
    }
    let next = evolve_prompt(prompt, &feedback, backends.judge.as_ref(), prompts, &cfg.retry);
    tracing::info!(
        cycle = k,
        version = next.version,
        changes = next.changes.len(),
        "cycle finished"
    );
    Ok(CycleRecord {
        cycle: k,
        prompt: prompt.clone(),
        feedback,
        next,
        reports,
        recall,
    })
}

/// Runs `cycles` rounds of episode, feedback and prompt rewrite, starting
/// from the standard prompt. `on_cycle` sees each record as it completes.
pub fn run_evolution(
    blueprints: &[Blueprint],
    cfg: &EvolutionConfig,
    backends: &EvolutionBackends,
    prompts: &PromptRegistry,
    on_cycle: &mut dyn FnMut(&CycleRecord),
) -> Result<Vec<CycleRecord>, EvolveError> {
    if cfg.agent.kind != AgentKind::Awi {
        return Err(EvolveError::AgentKind(cfg.agent.kind));
    }
    if cfg.cycles == 0 || blueprints.is_empty() {
        return Err(EvolveError::Empty);
    }
    let initial = prompts.get(MEMORY_UPDATE_AWI)?.body.clone();
    let mut prompt = PolicyPrompt::from_template(0, initial)?;
    let mut records: Vec<CycleRecord> = Vec::with_capacity(cfg.cycles);
    for k in 0..cfg.cycles {
        let span = tracing::info_span!("evolution", cycle = k);
        let _guard = span.enter();
        match run_cycle(k, &prompt, blueprints, cfg, backends, prompts) {
            Ok(record) => {
                on_cycle(&record);
                prompt = record.next.clone();
                records.push(record);
            }
            Err(e) => {
                return Err(EvolveError::Cycle {
                    cycle: k,
                    source: Box::new(e),
                    completed: records,
                })
            }
        }
    }
    Ok(records)
}
