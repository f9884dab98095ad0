use std::collections::BTreeSet;

use serde_json::{json, Map, Value};

use super::{compact, pretty, Evolution, GenError, Genesis, VerifierOutcome};
use crate::backend::prompts::{CHECK_QUERY_EXPOSURE, REFINE_QUERY, SAMPLE_INITIAL_QUERIES, SAMPLE_UPDATE_QUERIES};
use crate::model::{ExposureUtterance, PersonaRecord, StateAssignment, StateSchema};

/// Verified openers: the initial-exposure sessions and each period's sessions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exposure {
    pub initial_queries: Vec<ExposureUtterance>,
    pub update_queries: Vec<Vec<ExposureUtterance>>,
    pub outcomes: Vec<VerifierOutcome>,
}

fn ordered(schema: &StateSchema, state: &StateAssignment) -> Value {
    Value::Object(
        schema
            .names()
            .filter_map(|n| state.get(n).map(|v| (n.to_string(), json!(v))))
            .collect(),
    )
}

/// Checks that `exposed` can be read back from `query` alone, refining the
/// query when it cannot. Returns the final query text and the outcome.
pub fn verify_query(
    g: &Genesis<'_>,
    schema: &StateSchema,
    query: &str,
    exposed: &StateAssignment,
) -> Result<(String, VerifierOutcome), GenError> {
    let choices = pretty(&schema.subset_json(exposed.keys()));
    let mut query = query.to_string();
    let mut last = String::new();
    for attempt in 1..=g.attempts() {
        let predicted = g.ask_json(
            CHECK_QUERY_EXPOSURE,
            vec![("query", query.clone()), ("state_choices_json", choices.clone())],
            &[],
        )?;
        last = compact(&predicted);
        if exposed.iter().all(|(k, v)| predicted[k].as_str() == Some(v)) {
            return Ok((
                query,
                VerifierOutcome {
                    accepted: true,
                    attempts: attempt,
                    last_prediction: last,
                },
            ));
        }
        if attempt == g.attempts() {
            break;
        }
        let refined = g.ask_json(
            REFINE_QUERY,
            vec![
                ("query", query.clone()),
                ("exposed_states_json", pretty(&ordered(schema, exposed))),
                ("state_choices_json", pretty(&schema.choices_json())),
            ],
            &[],
        )?;
        if let Some(q) = refined["query"].as_str().map(str::trim).filter(|q| !q.is_empty()) {
            query = q.to_string();
        }
    }
    Ok((
        query,
        VerifierOutcome {
            accepted: false,
            attempts: g.attempts(),
            last_prediction: last,
        },
    ))
}

fn initial_queries(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    schema: &StateSchema,
    initial: &StateAssignment,
    outcomes: &mut Vec<VerifierOutcome>,
) -> Result<Vec<ExposureUtterance>, GenError> {
    let mut uncovered: BTreeSet<String> = schema.names().map(str::to_string).collect();
    let mut out = Vec::new();
    let mut last_failure = String::new();
    for _ in 0..g.attempts() {
        if uncovered.is_empty() {
            break;
        }
        let pending = initial.restrict(uncovered.iter().map(String::as_str));
        let reply = g.ask_json(
            SAMPLE_INITIAL_QUERIES,
            vec![
                ("start_date", g.cfg.start_date.clone()),
                ("user_profile", Genesis::profile(persona)),
                ("initial_state_json", pretty(&ordered(schema, &pending))),
                ("state_schema_json", pretty(&schema.choices_json())),
            ],
            &[],
        )?;
        let items = match &reply {
            Value::Array(a) => a.clone(),
            other => other["queries"].as_array().cloned().unwrap_or_default(),
        };
        for item in items {
            let query = item["query"].as_str().unwrap_or("").trim().to_string();
            let mut exposed = StateAssignment::new();
            for (k, v) in item["exposed_states"].as_object().cloned().unwrap_or_default() {
                if exposed.len() < 3 && v.as_str().is_some_and(|v| initial.get(&k) == Some(v)) {
                    exposed.insert(k, v.as_str().unwrap_or_default());
                }
            }
            if query.is_empty() || exposed.is_empty() || !exposed.keys().any(|k| uncovered.contains(k)) {
                continue;
            }
            let (query, outcome) = verify_query(g, schema, &query, &exposed)?;
            if !outcome.accepted {
                last_failure = format!("{query:?} does not expose {}", compact(&exposed));
                tracing::debug!(%last_failure, "initial query rejected");
                outcomes.push(outcome);
                continue;
            }
            outcomes.push(outcome);
            for k in exposed.keys() {
                uncovered.remove(k);
            }
            out.push(ExposureUtterance { query, exposed });
        }
    }
    if !uncovered.is_empty() {
        return Err(GenError::Unverified {
            stage: "initial queries",
            attempts: g.attempts(),
            detail: format!(
                "variables never exposed: {}{}",
                uncovered.into_iter().collect::<Vec<_>>().join(", "),
                if last_failure.is_empty() {
                    String::new()
                } else {
                    format!("; last failure: {last_failure}")
                }
            ),
        });
    }
    Ok(out)
}

fn update_queries(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    schema: &StateSchema,
    t: usize,
    before: &StateAssignment,
    plan: &crate::model::PeriodPlan,
    outcomes: &mut Vec<VerifierOutcome>,
) -> Result<Vec<ExposureUtterance>, GenError> {
    let context: Vec<Value> = plan
        .events
        .iter()
        .map(|e| {
            let transition: Map<String, Value> = e
                .states
                .iter()
                .map(|s| (s.clone(), json!({"from": before.get(s), "to": plan.updates.get(s)})))
                .collect();
            json!({"background": e.narrative, "state_transition": transition})
        })
        .collect();
    let mut feedback = Vec::new();
    let mut texts = None;
    for _ in 0..g.attempts() {
        let reply = g.ask_json(
            SAMPLE_UPDATE_QUERIES,
            vec![
                ("start_date", g.cfg.start_date.clone()),
                (
                    "user_profile_json",
                    pretty(&json!({"name": persona.name, "profile": persona.profile})),
                ),
                ("period_start", g.date(t - 1)),
                ("period_end", g.date(t)),
                ("context_json", pretty(&context)),
                ("state_schema_json", pretty(&schema.choices_json())),
            ],
            &feedback,
        )?;
        let list: Vec<String> = match &reply {
            Value::Array(a) => a.clone(),
            other => other["queries"].as_array().cloned().unwrap_or_default(),
        }
        .iter()
        .map(|q| {
            q.as_str()
                .map(str::to_string)
                .or_else(|| q["query"].as_str().map(str::to_string))
                .unwrap_or_default()
        })
        .collect();
        if list.len() == context.len() && list.iter().all(|q| !q.trim().is_empty()) {
            texts = Some(list);
            break;
        }
        feedback.push(format!(
            "Return exactly {} non-empty queries, one per context event, in the same order.",
            context.len()
        ));
    }
    let texts = texts.ok_or_else(|| GenError::Unverified {
        stage: "update queries",
        attempts: g.attempts(),
        detail: format!("period {t}: wrong number of queries"),
    })?;

    let mut out = Vec::new();
    for (event, text) in plan.events.iter().zip(texts) {
        let exposed = plan.updates.restrict(event.states.iter().map(String::as_str));
        let (query, outcome) = verify_query(g, schema, text.trim(), &exposed)?;
        if !outcome.accepted {
            return Err(GenError::Unverified {
                stage: "update queries",
                attempts: outcome.attempts,
                detail: format!("period {t}: {query:?} does not expose {}", compact(&exposed)),
            });
        }
        outcomes.push(outcome);
        out.push(ExposureUtterance { query, exposed });
    }
    Ok(out)
}

/// Initial-exposure queries covering the whole initial state, and one
/// verified update query per life event of every period.
pub fn generate_exposure_queries(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    schema: &StateSchema,
    evolution: &Evolution,
) -> Result<Exposure, GenError> {
    let mut outcomes = Vec::new();
    let initial = initial_queries(g, persona, schema, &evolution.initial_state, &mut outcomes)?;
    let mut per_period = Vec::with_capacity(evolution.periods.len());
    let mut state = evolution.initial_state.clone();
    for (i, plan) in evolution.periods.iter().enumerate() {
        per_period.push(update_queries(g, persona, schema, i + 1, &state, plan, &mut outcomes)?);
        state = state.overlay(&plan.updates);
    }
    Ok(Exposure {
        initial_queries: initial,
        update_queries: per_period,
        outcomes,
    })
}
