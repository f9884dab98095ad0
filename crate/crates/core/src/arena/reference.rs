use std::collections::BTreeMap;

use rand::Rng;
use serde_json::{json, Value};

use super::{AgentError, AssistantHandle, Evaluation};
use crate::model::{state_at, Blueprint, EvaluationQuestion, Message, StateAssignment, StateSchema, VariantKey};
use crate::rng::rng_for;

/// Index of the option whose answer text belongs to the variant of `state`.
fn matching_option(question: &EvaluationQuestion, options: &[String], state: &StateAssignment) -> Option<usize> {
    let key = VariantKey::from_state(&question.required, state).ok()?;
    let answer = question.variants.get(&key)?;
    options.iter().position(|o| o == answer)
}

/// Reads the true state straight from the blueprint; the ceiling reference.
#[derive(Debug, Clone, Default)]
pub struct OracleAssistant {
    state: StateAssignment,
}

impl OracleAssistant {
    pub fn new() -> Self {
        Self::default()
    }
}

impl AssistantHandle for OracleAssistant {
    fn descriptor(&self) -> String {
        "oracle".into()
    }

    fn observe_position(&mut self, blueprint: &Blueprint, t: usize) {
        self.state = state_at(blueprint, t).unwrap_or_default();
    }

    fn respond(&mut self, _: &str) -> Result<String, AgentError> {
        Ok("Noted.".into())
    }

    fn evaluate(&self, question: &EvaluationQuestion, options: &[String]) -> Result<Evaluation, AgentError> {
        Ok(Evaluation {
            choice: matching_option(question, options, &self.state),
            retrieved: Vec::new(),
        })
    }

    fn probe(&self, schema: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError> {
        Ok(schema
            .names()
            .map(|n| (n.to_string(), self.state.get(n).map(str::to_string)))
            .collect())
    }

    fn evaluate_with_truth(
        &self,
        question: &EvaluationQuestion,
        options: &[String],
        truth: &StateAssignment,
    ) -> Result<Option<usize>, AgentError> {
        Ok(matching_option(question, options, truth))
    }

    fn ingest_replay(&mut self, _: &[Message]) -> Result<(), AgentError> {
        Ok(())
    }

    fn memory_fingerprint(&self) -> String {
        String::new()
    }

    fn memory_dump(&self) -> Value {
        json!({"kind": "oracle"})
    }
}

/// Remembers nothing and guesses uniformly, but uses injected states
/// perfectly, so its upper bound is 1 and its memory score is about 0.
#[derive(Debug, Clone)]
pub struct RandomAssistant {
    seed: u64,
    position: usize,
}

impl RandomAssistant {
    pub fn new(seed: u64) -> Self {
        RandomAssistant { seed, position: 0 }
    }
}

impl AssistantHandle for RandomAssistant {
    fn descriptor(&self) -> String {
        // the seed is recorded on the trace
        "random".into()
    }

    fn observe_position(&mut self, _: &Blueprint, t: usize) {
        self.position = t;
    }

    fn respond(&mut self, _: &str) -> Result<String, AgentError> {
        Ok("Okay.".into())
    }

    fn evaluate(&self, question: &EvaluationQuestion, options: &[String]) -> Result<Evaluation, AgentError> {
        if options.is_empty() {
            return Ok(Evaluation::default());
        }
        let mut rng = rng_for(self.seed, &format!("random/t{}/q{}", self.position, question.id));
        Ok(Evaluation {
            choice: Some(rng.random_range(0..options.len())),
            retrieved: Vec::new(),
        })
    }

    fn probe(&self, schema: &StateSchema) -> Result<BTreeMap<String, Option<String>>, AgentError> {
        let mut rng = rng_for(self.seed, &format!("random/t{}/probe", self.position));
        Ok(schema
            .variables
            .iter()
            .map(|v| {
                let pick = (!v.choices.is_empty()).then(|| v.choices[rng.random_range(0..v.choices.len())].clone());
                (v.name.clone(), pick)
            })
            .collect())
    }

    fn evaluate_with_truth(
        &self,
        question: &EvaluationQuestion,
        options: &[String],
        truth: &StateAssignment,
    ) -> Result<Option<usize>, AgentError> {
        Ok(matching_option(question, options, truth))
    }

    fn ingest_replay(&mut self, _: &[Message]) -> Result<(), AgentError> {
        Ok(())
    }

    fn memory_fingerprint(&self) -> String {
        String::new()
    }

    fn memory_dump(&self) -> Value {
        json!({"kind": "random"})
    }
}
