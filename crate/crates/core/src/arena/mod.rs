//! Episode runner: exposure sessions with a simulated user, the evaluation
//! battery after every period, and off-policy replay.

mod reference;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use crate::backend::prompts::USER_FOLLOWUP;
use crate::backend::{
    complete_with_retry, BackendError, ChatBackend, ChatRequest, PromptRegistry, RetryPolicy, TemplateError,
};
use crate::memory::MemoryError;
use crate::model::{
    ground_truth_variant, state_at, Blueprint, EpisodeMode, EpisodeTrace, EvaluationQuestion, EvaluationRecord,
    ExposureUtterance, Message, ModelError, PeriodTraceEntry, Role, StateAssignment, StateSchema,
};

pub use reference::{OracleAssistant, RandomAssistant};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ArenaError {
    #[error("position {position}, session {session}: {source}")]
    Session {
        position: usize,
        session: usize,
        #[source]
        source: AgentError,
        partial: Vec<Message>,
    },
    #[error("position {position}: {source}")]
    Evaluation {
        position: usize,
        #[source]
        source: AgentError,
    },
    #[error("user simulator: {0}")]
    User(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("replay trace does not match blueprint: {0}")]
    Compatibility(String),
    #[error("position {0}: long-term memory changed during evaluation")]
    EvaluationMutated(usize),
}

/// What the assistant answered for one multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Evaluation {
    /// Zero-based option index, `None` for an abstention.
    pub choice: Option<usize>,
    pub retrieved: Vec<String>,
}

/// The assistant under test. Evaluation methods take `&self`, so they cannot
/// write to long-term memory.
pub trait AssistantHandle: Send {
    fn descriptor(&self) -> String;

    /// Called before the sessions of position `t`.
    fn observe_position(&mut self, _blueprint: &Blueprint, _t: usize) {}

    fn respond(&mut self, user_msg: &str) -> Result<String, AgentError>;

    fn evaluate(&self, question: &EvaluationQuestion, options: &[String]) -> Result<Evaluation, AgentError>;

    /// Value per schema variable; `None` when the reply has no legal choice.
    fn probe(&self, schema: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError>;

    /// Answers with the required ground-truth states injected.
    fn evaluate_with_truth(
        &self,
        question: &EvaluationQuestion,
        options: &[String],
        truth: &StateAssignment,
    ) -> Result<Option<usize>, AgentError>;

    /// Feeds a recorded transcript through the memory write path only.
    fn ingest_replay(&mut self, messages: &[Message]) -> Result<(), AgentError>;

    /// Hash of the long-term store.
    fn memory_fingerprint(&self) -> String;

    fn memory_dump(&self) -> Value;
}

impl<T: AssistantHandle + ?Sized> AssistantHandle for Box<T> {
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
    fn observe_position(&mut self, blueprint: &Blueprint, t: usize) {
        (**self).observe_position(blueprint, t)
    }
    fn respond(&mut self, user_msg: &str) -> Result<String, AgentError> {
        (**self).respond(user_msg)
    }
    fn evaluate(&self, question: &EvaluationQuestion, options: &[String]) -> Result<Evaluation, AgentError> {
        (**self).evaluate(question, options)
    }
    fn probe(&self, schema: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError> {
        (**self).probe(schema)
    }
    fn evaluate_with_truth(
        &self,
        question: &EvaluationQuestion,
        options: &[String],
        truth: &StateAssignment,
    ) -> Result<Option<usize>, AgentError> {
        (**self).evaluate_with_truth(question, options, truth)
    }
    fn ingest_replay(&mut self, messages: &[Message]) -> Result<(), AgentError> {
        (**self).ingest_replay(messages)
    }
    fn memory_fingerprint(&self) -> String {
        (**self).memory_fingerprint()
    }
    fn memory_dump(&self) -> Value {
        (**self).memory_dump()
    }
}

/// One exposure session: the scripted opener followed by simulated follow-ups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionScript {
    pub period: usize,
    pub opener: ExposureUtterance,
    /// User/assistant exchanges, the opener included.
    pub rounds: usize,
}

/// Role-plays the blueprint's user after the opener.
#[derive(Clone)]
pub struct UserSimulator {
    backend: Arc<dyn ChatBackend>,
    prompts: Arc<PromptRegistry>,
    retry: RetryPolicy,
}

pub fn render_rounds(messages: &[Message]) -> String {
    messages
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| match m.role {
            Role::User => format!("User: {}", m.content),
            _ => format!("Assistant: {}", m.content),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl UserSimulator {
    pub fn new(backend: Arc<dyn ChatBackend>, prompts: Arc<PromptRegistry>) -> Self {
        UserSimulator {
            backend,
            prompts,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn followup(
        &self,
        blueprint: &Blueprint,
        t: usize,
        opener: &str,
        transcript: &[Message],
    ) -> Result<String, ArenaError> {
        let bindings: BTreeMap<&str, String> = [
            ("start_date", blueprint.start_date.clone()),
            ("user_profile", blueprint.persona.formatted()),
            ("current_date", blueprint.date_at(t)),
            ("query", opener.to_string()),
            ("context", render_rounds(transcript)),
            (
                "state_schema_json",
                serde_json::to_string_pretty(&blueprint.schema.choices_json()).unwrap_or_default(),
            ),
        ]
        .into_iter()
        .collect();
        let prompt = self.prompts.render(USER_FOLLOWUP, &bindings)?;
        let reply = complete_with_retry(
            self.backend.as_ref(),
            &ChatRequest::user(USER_FOLLOWUP, prompt),
            &self.retry,
        )?;
        let text = reply.text.trim().to_string();
        for value in blueprint.schema.variables.iter().flat_map(|v| &v.choices) {
            if text.contains(value.as_str()) {
                tracing::warn!(value = %value, "user follow-up mentions a schema value");
            }
        }
        Ok(text)
    }
}

/// Runs one session and returns its `2 * rounds` messages.
pub fn run_session(
    blueprint: &Blueprint,
    script: &SessionScript,
    session: usize,
    user: &UserSimulator,
    assistant: &mut dyn AssistantHandle,
) -> Result<Vec<Message>, ArenaError> {
    let mut transcript = Vec::with_capacity(2 * script.rounds);
    let mut user_msg = script.opener.query.clone();
    for round in 0..script.rounds.max(1) {
        if round > 0 {
            user_msg = user.followup(blueprint, script.period, &script.opener.query, &transcript)?;
        }
        transcript.push(Message::user(user_msg.clone()));
        match assistant.respond(&user_msg) {
            Ok(reply) => transcript.push(Message::assistant(reply)),
            Err(source) => {
                return Err(ArenaError::Session {
                    position: script.period,
                    session,
                    source,
                    partial: transcript,
                })
            }
        }
    }
    Ok(transcript)
}

/// Probe answer per schema variable.
pub type ProbeAnswers = BTreeMap<String, Option<String>>;

/// The multiple-choice, upper-bound and probe battery at position `t`.
pub fn evaluate_position(
    blueprint: &Blueprint,
    t: usize,
    assistant: &dyn AssistantHandle,
) -> Result<(Vec<EvaluationRecord>, ProbeAnswers), ArenaError> {
    let state = state_at(blueprint, t)?;
    let before = assistant.memory_fingerprint();
    let wrap = |source| ArenaError::Evaluation { position: t, source };
    let mut records = Vec::with_capacity(blueprint.questions.len());
    for q in &blueprint.questions {
        let options = q.options_at(t).to_vec();
        let texts = q.option_texts(t);
        let truth_key = ground_truth_variant(q, &state)?;
        let truth = options
            .iter()
            .position(|k| *k == truth_key)
            .ok_or_else(|| ModelError::Integrity(format!("question {} position {t}: truth not offered", q.id)))?;
        let eval = assistant.evaluate(q, &texts).map_err(wrap)?;
        let required = state.restrict(q.required.iter().map(String::as_str));
        let ub = assistant.evaluate_with_truth(q, &texts, &required).map_err(wrap)?;
        let n = options.len();
        let clamp = |c: Option<usize>| c.filter(|&i| i < n);
        records.push(EvaluationRecord {
            question_id: q.id,
            options,
            truth,
            chosen: clamp(eval.choice),
            ub_chosen: clamp(ub),
            retrieved: eval.retrieved,
        });
    }
    let probe = assistant.probe(&blueprint.schema).map_err(wrap)?;
    if assistant.memory_fingerprint() != before {
        return Err(ArenaError::EvaluationMutated(t));
    }
    Ok((records, probe))
}

/// Sessions of position `t` followed by the evaluation battery.
pub fn run_period(
    blueprint: &Blueprint,
    t: usize,
    user: &UserSimulator,
    assistant: &mut dyn AssistantHandle,
) -> Result<PeriodTraceEntry, ArenaError> {
    assistant.observe_position(blueprint, t);
    let mut sessions = Vec::new();
    for (i, opener) in blueprint.openers_at(t).iter().enumerate() {
        let script = SessionScript {
            period: t,
            opener: opener.clone(),
            rounds: blueprint.config.turns_per_exposure,
        };
        sessions.push(run_session(blueprint, &script, i, user, assistant)?);
    }
    let (evaluations, probe) = evaluate_position(blueprint, t, assistant)?;
    Ok(PeriodTraceEntry {
        position: t,
        date: blueprint.date_at(t),
        sessions,
        evaluations,
        probe,
        notes: Vec::new(),
    })
}

fn check_replay(blueprint: &Blueprint, replay: &EpisodeTrace) -> Result<(), ArenaError> {
    if replay.blueprint_ref != blueprint.id {
        return Err(ArenaError::Compatibility(format!(
            "trace is for {:?}, blueprint is {:?}",
            replay.blueprint_ref, blueprint.id
        )));
    }
    if replay.periods.len() != blueprint.n_periods() + 1 {
        return Err(ArenaError::Compatibility(format!(
            "trace has {} positions, blueprint needs {}",
            replay.periods.len(),
            blueprint.n_periods() + 1
        )));
    }
    for (t, p) in replay.periods.iter().enumerate() {
        if p.position != t || p.sessions.len() != blueprint.openers_at(t).len() {
            return Err(ArenaError::Compatibility(format!(
                "position {t} has mismatched sessions"
            )));
        }
        for (s, opener) in p.sessions.iter().zip(blueprint.openers_at(t)) {
            if s.first().map(|m| m.content.as_str()) != Some(opener.query.as_str()) {
                return Err(ArenaError::Compatibility(format!(
                    "position {t}: opener differs from blueprint"
                )));
            }
        }
    }
    Ok(())
}

/// Where the conversations of an episode come from.
pub enum Interaction<'a> {
    OnPolicy(&'a UserSimulator),
    /// Recorded transcripts from another run, with a label for the trace.
    OffPolicy {
        replay: &'a EpisodeTrace,
        source: String,
    },
}

/// Runs positions `0..=N_p` in order.
pub fn run_episode(
    blueprint: &Blueprint,
    assistant: &mut dyn AssistantHandle,
    interaction: Interaction<'_>,
    seed: u64,
) -> Result<EpisodeTrace, ArenaError> {
    let span = tracing::info_span!("episode", blueprint = %blueprint.id, agent = %assistant.descriptor());
    let _guard = span.enter();
    let mut periods = Vec::with_capacity(blueprint.n_periods() + 1);
    let (mode, replay_source) = match &interaction {
        Interaction::OnPolicy(_) => (EpisodeMode::OnPolicy, None),
        Interaction::OffPolicy { replay, source } => {
            check_replay(blueprint, replay)?;
            (EpisodeMode::OffPolicy, Some(source.clone()))
        }
    };
    for t in blueprint.positions() {
        let entry = match &interaction {
            Interaction::OnPolicy(user) => run_period(blueprint, t, user, assistant)?,
            Interaction::OffPolicy { replay, .. } => {
                assistant.observe_position(blueprint, t);
                let sessions = replay.periods[t].sessions.clone();
                for (i, s) in sessions.iter().enumerate() {
                    assistant.ingest_replay(s).map_err(|source| ArenaError::Session {
                        position: t,
                        session: i,
                        source,
                        partial: Vec::new(),
                    })?;
                }
                let (evaluations, probe) = evaluate_position(blueprint, t, assistant)?;
                PeriodTraceEntry {
                    position: t,
                    date: blueprint.date_at(t),
                    sessions,
                    evaluations,
                    probe,
                    notes: Vec::new(),
                }
            }
        };
        tracing::debug!(position = t, "position evaluated");
        periods.push(entry);
    }
    Ok(EpisodeTrace {
        blueprint_ref: blueprint.id.clone(),
        agent_descriptor: assistant.descriptor(),
        mode,
        replay_source,
        seed,
        periods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::world::scripted_world;
    use crate::model::fixtures::tiny_blueprint;

    fn user(seed: u64) -> UserSimulator {
        UserSimulator::new(Arc::new(scripted_world(seed)), Arc::new(PromptRegistry::standard()))
    }

    struct Echo;
    impl AssistantHandle for Echo {
        fn descriptor(&self) -> String {
            "echo".into()
        }
        fn respond(&mut self, user_msg: &str) -> Result<String, AgentError> {
            if user_msg == "boom" {
                return Err(AgentError::Other("refused".into()));
            }
            Ok(format!("re: {user_msg}"))
        }
        fn evaluate(&self, _: &EvaluationQuestion, _: &[String]) -> Result<Evaluation, AgentError> {
            Ok(Evaluation {
                choice: Some(99),
                retrieved: vec![],
            })
        }
        fn probe(&self, _: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError> {
            Ok(BTreeMap::new())
        }
        fn evaluate_with_truth(
            &self,
            _: &EvaluationQuestion,
            _: &[String],
            _: &StateAssignment,
        ) -> Result<Option<usize>, AgentError> {
            Ok(None)
        }
        fn ingest_replay(&mut self, _: &[Message]) -> Result<(), AgentError> {
            Ok(())
        }
        fn memory_fingerprint(&self) -> String {
            String::new()
        }
        fn memory_dump(&self) -> Value {
            Value::Null
        }
    }

    fn script(query: &str, rounds: usize) -> SessionScript {
        SessionScript {
            period: 0,
            opener: ExposureUtterance {
                query: query.into(),
                exposed: StateAssignment::new(),
            },
            rounds,
        }
    }

    #[test]
    fn single_round_session() {
        let bp = tiny_blueprint();
        let msgs = run_session(&bp, &script("hello", 1), 0, &user(0), &mut Echo).unwrap();
        assert_eq!(msgs, vec![Message::user("hello"), Message::assistant("re: hello")]);
    }

    #[test]
    fn four_rounds_alternate_with_verbatim_opener() {
        let bp = tiny_blueprint();
        let msgs = run_session(&bp, &script("opening line", 4), 0, &user(0), &mut Echo).unwrap();
        assert_eq!(msgs.len(), 8);
        assert_eq!(msgs[0].content, "opening line");
        for (i, m) in msgs.iter().enumerate() {
            assert_eq!(m.role, if i % 2 == 0 { Role::User } else { Role::Assistant });
        }
        let again = run_session(&bp, &script("opening line", 4), 0, &user(0), &mut Echo).unwrap();
        assert_eq!(msgs, again);
    }

    #[test]
    fn failing_assistant_keeps_partial_transcript() {
        let bp = tiny_blueprint();
        let err = run_session(&bp, &script("boom", 2), 3, &user(0), &mut Echo).unwrap_err();
        match err {
            ArenaError::Session { session, partial, .. } => {
                assert_eq!(session, 3);
                assert_eq!(partial, vec![Message::user("boom")]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_choice_is_abstention() {
        let bp = tiny_blueprint();
        let trace = run_episode(&bp, &mut Echo, Interaction::OnPolicy(&user(1)), 1).unwrap();
        assert_eq!(trace.periods.len(), 3);
        assert!(trace
            .periods
            .iter()
            .flat_map(|p| &p.evaluations)
            .all(|e| e.chosen.is_none()));
    }

    #[test]
    fn oracle_is_perfect_at_every_position() {
        let bp = tiny_blueprint();
        let mut oracle = OracleAssistant::new();
        let trace = run_episode(&bp, &mut oracle, Interaction::OnPolicy(&user(2)), 2).unwrap();
        for p in &trace.periods {
            assert!(p.evaluations.iter().all(|e| e.correct() && e.ub_correct()));
            let state = state_at(&bp, p.position).unwrap();
            for (k, v) in &p.probe {
                assert_eq!(v.as_deref(), state.get(k));
            }
        }
    }

    #[test]
    fn replay_must_match_blueprint() {
        let bp = tiny_blueprint();
        let mut oracle = OracleAssistant::new();
        let mut trace = run_episode(&bp, &mut oracle, Interaction::OnPolicy(&user(2)), 2).unwrap();
        let ok = run_episode(
            &bp,
            &mut Echo,
            Interaction::OffPolicy {
                replay: &trace,
                source: "t.json".into(),
            },
            0,
        )
        .unwrap();
        assert_eq!(ok.mode, EpisodeMode::OffPolicy);
        assert_eq!(ok.periods[1].sessions, trace.periods[1].sessions);
        trace.blueprint_ref = "other".into();
        let err = run_episode(
            &bp,
            &mut Echo,
            Interaction::OffPolicy {
                replay: &trace,
                source: "t".into(),
            },
            0,
        );
        assert!(matches!(err, Err(ArenaError::Compatibility(_))));
    }

    #[test]
    fn scripted_followups_never_leak_schema_values() {
        let bp = tiny_blueprint();
        let backend = scripted_world(4);
        let sim = UserSimulator::new(Arc::new(backend), Arc::new(PromptRegistry::standard()));
        let msgs = run_session(&bp, &script("start", 6), 0, &sim, &mut Echo).unwrap();
        for m in msgs.iter().skip(1).filter(|m| m.role == Role::User) {
            for v in bp.schema.variables.iter().flat_map(|v| &v.choices) {
                assert!(!m.content.contains(&format!(" {v} ")), "{v} leaked");
            }
        }
    }
}
