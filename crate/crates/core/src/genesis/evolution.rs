use std::collections::BTreeSet;

use serde_json::{json, Map, Value};

use super::{pretty, GenError, Genesis};
use crate::backend::prompts::{ELABORATE_STATE_UPDATES, SAMPLE_INITIAL_STATE, SAMPLE_STATE_UPDATES};
use crate::model::{LifeEvent, PeriodPlan, PersonaRecord, StateAssignment, StateSchema};

/// Initial state plus per-period plans (update queries are filled in later).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evolution {
    pub initial_state: StateAssignment,
    pub periods: Vec<PeriodPlan>,
}

fn months(g: &Genesis<'_>) -> String {
    (g.cfg.n_periods * g.cfg.period_months as usize).to_string()
}

fn ordered_json(schema: &StateSchema, state: &StateAssignment) -> Value {
    let map: Map<String, Value> = schema
        .names()
        .filter_map(|n| state.get(n).map(|v| (n.to_string(), json!(v))))
        .collect();
    Value::Object(map)
}

fn sample_initial(g: &Genesis<'_>, persona: &PersonaRecord, schema: &StateSchema) -> Result<StateAssignment, GenError> {
    let mut feedback = Vec::new();
    for _ in 0..g.attempts() {
        let reply = g.ask_json(
            SAMPLE_INITIAL_STATE,
            vec![
                ("num_total_months", months(g)),
                ("start_date", g.cfg.start_date.clone()),
                ("user_profile", Genesis::profile(persona)),
                ("state_schema_json", pretty(&schema.choices_json())),
            ],
            &feedback,
        )?;
        let mut state = StateAssignment::new();
        let mut problems = Vec::new();
        for var in &schema.variables {
            match reply[&var.name].as_str() {
                Some(v) if schema.is_legal(&var.name, v) => state.insert(&var.name, v),
                Some(v) => problems.push(format!("{}: {v:?} is not one of {:?}", var.name, var.choices)),
                None => problems.push(format!("{}: missing", var.name)),
            }
        }
        if problems.is_empty() {
            return Ok(state);
        }
        feedback.push(format!(
            "Invalid initial state ({}). Select exactly one listed value for every state variable.",
            problems.join("; ")
        ));
    }
    Err(GenError::Unverified {
        stage: "initial state",
        attempts: g.attempts(),
        detail: feedback.last().cloned().unwrap_or_default(),
    })
}

fn check_updates(
    schema: &StateSchema,
    current: &StateAssignment,
    updated: &Value,
) -> Result<StateAssignment, Vec<String>> {
    let Some(map) = updated.as_object() else {
        return Err(vec!["\"updated\" must be an object".into()]);
    };
    let mut out = StateAssignment::new();
    let mut problems = Vec::new();
    for (k, v) in map {
        let Some(v) = v.as_str() else {
            problems.push(format!("{k}: value must be a string"));
            continue;
        };
        if schema.get(k).is_none() {
            problems.push(format!("{k} is not a state variable"));
        } else if !schema.is_legal(k, v) {
            problems.push(format!("{k}: {v:?} is not a valid choice"));
        } else if current.get(k) == Some(v) {
            problems.push(format!("{k} already has value {v:?}"));
        } else {
            out.insert(k.as_str(), v);
        }
    }
    if out.is_empty() && problems.is_empty() {
        problems.push("no state variable was updated".into());
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(problems)
    }
}

fn elaborate(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    schema: &StateSchema,
    t: usize,
    summary: &str,
    before: &StateAssignment,
    updates: &StateAssignment,
) -> Result<Vec<LifeEvent>, GenError> {
    let changes: Map<String, Value> = schema
        .names()
        .filter_map(|n| {
            updates
                .get(n)
                .map(|to| (n.to_string(), json!({"from": before.get(n), "to": to})))
        })
        .collect();
    let unchanged: Map<String, Value> = schema
        .names()
        .filter(|n| updates.get(n).is_none())
        .filter_map(|n| before.get(n).map(|v| (n.to_string(), json!(v))))
        .collect();
    let mut feedback = Vec::new();
    for _ in 0..g.attempts() {
        let reply = g.ask_json(
            ELABORATE_STATE_UPDATES,
            vec![
                ("start_date", g.cfg.start_date.clone()),
                ("user_profile", Genesis::profile(persona)),
                ("period_start", g.date(t - 1)),
                ("period_end", g.date(t)),
                ("period_summary", summary.to_string()),
                ("state_changes_json", pretty(&changes)),
                ("states_not_updated_json", pretty(&unchanged)),
            ],
            &feedback,
        )?;
        let mut events = Vec::new();
        for item in reply["events"].as_array().into_iter().flatten() {
            let narrative = item["event"].as_str().unwrap_or("").trim().to_string();
            let mut states: Vec<String> = Vec::new();
            for s in item["states"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(Value::as_str)
            {
                if updates.get(s).is_some() && !states.iter().any(|x| x == s) {
                    states.push(s.to_string());
                }
            }
            if !narrative.is_empty() && !states.is_empty() {
                events.push(LifeEvent { states, narrative });
            }
        }
        let covered: BTreeSet<&str> = events
            .iter()
            .flat_map(|e| e.states.iter().map(String::as_str))
            .collect();
        let missing: Vec<&str> = updates.keys().filter(|k| !covered.contains(k)).collect();
        if missing.is_empty() {
            return Ok(events);
        }
        feedback.push(format!(
            "The events must explain every state change; these are not covered: {}",
            missing.join(", ")
        ));
    }
    Err(GenError::Unverified {
        stage: "life events",
        attempts: g.attempts(),
        detail: format!("period {t}: {}", feedback.last().cloned().unwrap_or_default()),
    })
}

/// Samples the initial state and every period's updates and life events.
pub fn plan_evolution(g: &Genesis<'_>, persona: &PersonaRecord, schema: &StateSchema) -> Result<Evolution, GenError> {
    if schema.is_empty() {
        return Err(GenError::invalid("evolution", "schema has no variables"));
    }
    let initial_state = sample_initial(g, persona, schema)?;
    let n = g.cfg.n_periods;
    let per_period = g.cfg.changes_per_period(schema.len());
    let mut counts: Map<String, Value> = schema.names().map(|n| (n.to_string(), json!(0))).collect();
    let mut prior: Vec<Value> = Vec::new();
    let mut current = initial_state.clone();
    let mut periods = Vec::with_capacity(n);

    for t in 1..=n {
        let mut feedback: Vec<String> = Vec::new();
        let mut accepted = None;
        for _ in 0..g.attempts() {
            let reply = g.ask_json(
                SAMPLE_STATE_UPDATES,
                vec![
                    ("num_months", g.cfg.period_months.to_string()),
                    ("step", t.to_string()),
                    ("total_steps", n.to_string()),
                    ("remaining", (n - t).to_string()),
                    ("current_date", g.date(t - 1)),
                    ("end_date", g.date(t)),
                    ("start_date", g.cfg.start_date.clone()),
                    ("user_profile", Genesis::profile(persona)),
                    ("state_schema_json", pretty(&schema.choices_json())),
                    ("latest_state_json", pretty(&ordered_json(schema, &current))),
                    ("prior_updates_json", pretty(&prior)),
                    ("max_changes_per_state", g.cfg.max_changes_per_state.to_string()),
                    ("update_cnts_json", pretty(&counts)),
                    ("num_changes_per_period", per_period.to_string()),
                ],
                &feedback,
            )?;
            match check_updates(schema, &current, &reply["updated"]) {
                Ok(updates) => {
                    let summary = reply["period_summary"].as_str().unwrap_or("").trim().to_string();
                    accepted = Some((updates, summary));
                    break;
                }
                Err(problems) => {
                    tracing::debug!(period = t, ?problems, "state update proposal rejected");
                    feedback.push(format!(
                        "Rejected: {}. Propose the updates again using only listed values that differ from the current state.",
                        problems.join("; ")
                    ));
                }
            }
        }
        let Some((updates, summary)) = accepted else {
            return Err(GenError::Unverified {
                stage: "state updates",
                attempts: g.attempts(),
                detail: format!("period {t}: {}", feedback.last().cloned().unwrap_or_default()),
            });
        };
        let events = elaborate(g, persona, schema, t, &summary, &current, &updates)?;
        for k in updates.keys() {
            let c = counts.get(k).and_then(Value::as_u64).unwrap_or(0);
            counts.insert(k.to_string(), json!(c + 1));
        }
        prior.push(json!({"step": t, "date": g.date(t), "period_summary": summary, "updated": updates}));
        current = current.overlay(&updates);
        periods.push(PeriodPlan {
            index: t,
            summary,
            updates,
            events,
            update_queries: Vec::new(),
        });
    }
    Ok(Evolution { initial_state, periods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::scripted::ScriptedBackend;
    use crate::backend::world::scripted_world;
    use crate::backend::PromptRegistry;
    use crate::genesis::generate_schema_and_questions;
    use crate::model::{GenConfig, StateVariable};
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn persona() -> PersonaRecord {
        PersonaRecord {
            name: "A".into(),
            profile: "Engineer.".into(),
            source_id: "p".into(),
        }
    }

    fn one_var() -> StateSchema {
        StateSchema {
            variables: vec![StateVariable {
                name: "a".into(),
                choices: vec!["x".into(), "y".into()],
            }],
            alias_map: BTreeMap::new(),
        }
    }

    fn cfg(periods: usize) -> GenConfig {
        let mut c = GenConfig::base();
        c.n_periods = periods;
        c
    }

    #[test]
    fn legal_change_is_accepted() {
        let backend = ScriptedBackend::new(0)
            .reply(SAMPLE_INITIAL_STATE, r#"{"a": "x"}"#)
            .reply(
                SAMPLE_STATE_UPDATES,
                r#"{"period_summary": "s", "updated": {"a": "y"}}"#,
            )
            .reply(
                ELABORATE_STATE_UPDATES,
                r#"{"events": [{"states": ["a"], "event": "e"}]}"#,
            );
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, cfg(1));
        let evo = plan_evolution(&g, &persona(), &one_var()).unwrap();
        assert_eq!(evo.periods[0].updates.get("a"), Some("y"));
        assert_eq!(evo.periods[0].events.len(), 1);
    }

    #[test]
    fn no_op_proposal_is_reasked() {
        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let backend = ScriptedBackend::new(0)
            .reply(SAMPLE_INITIAL_STATE, r#"{"a": "x"}"#)
            .rule(SAMPLE_STATE_UPDATES, move |req, _| {
                seen.fetch_add(1, Ordering::SeqCst);
                Ok(if req.messages.len() == 1 {
                    r#"{"period_summary": "s", "updated": {"a": "x"}}"#
                } else {
                    r#"{"period_summary": "s", "updated": {"a": "y"}}"#
                }
                .to_string())
            })
            .reply(
                ELABORATE_STATE_UPDATES,
                r#"{"events": [{"states": ["a"], "event": "e"}]}"#,
            );
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, cfg(1));
        let evo = plan_evolution(&g, &persona(), &one_var()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(evo.periods[0].updates.get("a"), Some("y"));
    }

    #[test]
    fn persistent_invalid_proposals_fail() {
        let backend = ScriptedBackend::new(0)
            .reply(SAMPLE_INITIAL_STATE, r#"{"a": "x"}"#)
            .reply(
                SAMPLE_STATE_UPDATES,
                r#"{"period_summary": "s", "updated": {"b": "y"}}"#,
            );
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, cfg(1));
        assert!(matches!(
            plan_evolution(&g, &persona(), &one_var()),
            Err(GenError::Unverified {
                stage: "state updates",
                ..
            })
        ));
    }

    #[test]
    fn scripted_trajectory_respects_change_cap() {
        for seed in 0..3 {
            let backend = scripted_world(seed);
            let prompts = PromptRegistry::standard();
            let g = Genesis::new(&backend, &prompts, GenConfig::base());
            let draft = generate_schema_and_questions(&g, &persona()).unwrap();
            let evo = plan_evolution(&g, &persona(), &draft.schema).unwrap();
            assert_eq!(evo.periods.len(), 10);
            // count changes along the trajectory independently of the planner's own counters
            let mut changes: BTreeMap<&str, usize> = BTreeMap::new();
            let mut state = evo.initial_state.clone();
            for p in &evo.periods {
                for (k, v) in p.updates.iter() {
                    assert_ne!(state.get(k), Some(v));
                    *changes.entry(k).or_default() += 1;
                }
                state = state.overlay(&p.updates);
            }
            assert!(changes.values().all(|&c| c <= 3), "{changes:?}");
        }
    }
}
