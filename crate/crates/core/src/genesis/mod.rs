//! Offline blueprint generation: persona summary, questions and state schema,
//! state evolution, exposure utterances and verified per-variant answers.
//!
//! Every stage talks to the model through the prompt registry and validates
//! what comes back. Invalid output is re-asked with a short feedback message a
//! bounded number of times before the stage fails.

mod answers;
mod assemble;
mod evolution;
mod exposure;
mod persona;
mod schema;

use std::collections::BTreeMap;

use serde_json::Value;

use crate::backend::{
    complete_json, complete_with_retry, BackendError, ChatBackend, ChatRequest, PromptRegistry, RetryPolicy,
    TemplateError,
};
use crate::model::{Blueprint, GenConfig, Message, ModelError, PersonaRecord, Violation};

pub use answers::{generate_variant_answers, VariantAnswers};
pub use assemble::{assemble_blueprint, materialize_options, BlueprintParts};
pub use evolution::{plan_evolution, Evolution};
pub use exposure::{generate_exposure_queries, verify_query, Exposure};
pub use persona::{read_pool, summarize_persona, synthetic_pool, PoolRecord, MAX_PROFILE_WORDS};
pub use schema::{generate_schema_and_questions, QuestionSkeleton, RawInfo, RawQuestion, SchemaDraft};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{stage}: {detail}")]
    Invalid { stage: &'static str, detail: String },
    #[error("{stage}: verification failed after {attempts} attempts: {detail}")]
    Unverified {
        stage: &'static str,
        attempts: usize,
        detail: String,
    },
    #[error("blueprint failed validation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
}

impl GenError {
    fn invalid(stage: &'static str, detail: impl Into<String>) -> Self {
        GenError::Invalid {
            stage,
            detail: detail.into(),
        }
    }
}

/// Outcome of a verify/refine loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierOutcome {
    pub accepted: bool,
    pub attempts: usize,
    /// What the verifier saw last (predicted values or the chosen variant).
    pub last_prediction: String,
}

/// Everything a generation stage needs to call the model.
pub struct Genesis<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a PromptRegistry,
    pub retry: RetryPolicy,
    pub cfg: GenConfig,
}

impl<'a> Genesis<'a> {
    pub fn new(backend: &'a dyn ChatBackend, prompts: &'a PromptRegistry, cfg: GenConfig) -> Self {
        Genesis {
            backend,
            prompts,
            retry: RetryPolicy::default(),
            cfg,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request(&self, tag: &str, bindings: Vec<(&str, String)>, feedback: &[String]) -> Result<ChatRequest, GenError> {
        let map: BTreeMap<&str, String> = bindings.into_iter().collect();
        let rendered = self.prompts.render(tag, &map)?;
        let mut messages = vec![Message::user(rendered)];
        messages.extend(feedback.iter().map(|f| Message::user(f.clone())));
        Ok(ChatRequest::new(tag, messages))
    }

    /// Renders `tag`, appends any feedback messages, and parses a JSON reply.
    fn ask_json(&self, tag: &str, bindings: Vec<(&str, String)>, feedback: &[String]) -> Result<Value, GenError> {
        let req = self.request(tag, bindings, feedback)?;
        Ok(complete_json(self.backend, &req, &self.retry)?)
    }

    fn ask_text(&self, tag: &str, bindings: Vec<(&str, String)>, feedback: &[String]) -> Result<String, GenError> {
        let req = self.request(tag, bindings, feedback)?;
        Ok(complete_with_retry(self.backend, &req, &self.retry)?.text)
    }

    fn attempts(&self) -> usize {
        self.cfg.max_refinements + 1
    }

    fn profile(persona: &PersonaRecord) -> String {
        persona.formatted()
    }

    fn date(&self, t: usize) -> String {
        crate::model::advance_date(&self.cfg.start_date, self.cfg.period_months * t as u32)
            .unwrap_or_else(|_| self.cfg.start_date.clone())
    }
}

fn compact(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

/// Runs the whole pipeline for one pool record.
pub fn generate_blueprint(
    genesis: &Genesis<'_>,
    record: &PoolRecord,
    id: &str,
    seed: u64,
) -> Result<Blueprint, GenError> {
    genesis.cfg.check()?;
    let span = tracing::info_span!("blueprint", id, source = %record.id);
    let _guard = span.enter();

    let persona = summarize_persona(genesis, record)?;
    tracing::debug!(name = %persona.name, "persona summarized");
    let draft = generate_schema_and_questions(genesis, &persona)?;
    tracing::debug!(variables = draft.schema.len(), "schema refined");
    let evolution = plan_evolution(genesis, &persona, &draft.schema)?;
    let exposure = generate_exposure_queries(genesis, &persona, &draft.schema, &evolution)?;
    let mut answered = Vec::with_capacity(draft.questions.len());
    for q in &draft.questions {
        answered.push(generate_variant_answers(genesis, q, &draft.schema)?);
    }
    assemble_blueprint(
        BlueprintParts {
            id: id.to_string(),
            persona,
            schema: draft.schema,
            evolution,
            exposure,
            questions: answered,
            config: genesis.cfg.clone(),
        },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::world::scripted_world;
    use crate::model::{state_at, to_versioned_json, validate_blueprint};

    pub(crate) fn small_config() -> GenConfig {
        let mut cfg = GenConfig::base();
        cfg.n_periods = 4;
        cfg.num_questions = 4;
        cfg
    }

    #[test]
    fn scripted_pipeline_yields_valid_blueprint() {
        let backend = scripted_world(3);
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, small_config());
        let pool = synthetic_pool(1, 3);
        let bp = generate_blueprint(&g, &pool[0], "user_000", 3).unwrap();
        assert!(validate_blueprint(&bp).is_empty());
        assert_eq!(bp.questions.len(), 4);
        assert_eq!(bp.periods.len(), 4);
        assert!(state_at(&bp, 4).unwrap().is_full_over(&bp.schema));
    }

    #[test]
    fn generation_is_reproducible() {
        let prompts = PromptRegistry::standard();
        let pool = synthetic_pool(1, 11);
        let run = || {
            let backend = scripted_world(11);
            let g = Genesis::new(&backend, &prompts, small_config());
            to_versioned_json(&generate_blueprint(&g, &pool[0], "user_000", 11).unwrap())
        };
        assert_eq!(run(), run());
    }
}
