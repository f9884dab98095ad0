use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{pretty, GenError, Genesis};
use crate::backend::prompts::{FIX_SCHEMA, REFINE_STATE_SCHEMA, SAMPLE_USER_QUESTIONS};
use crate::model::{PersonaRecord, StateSchema, StateVariable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInfo {
    pub info_type: String,
    pub info_choices: Vec<String>,
}

/// A sampled question with its un-merged info types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQuestion {
    #[serde(rename = "question")]
    pub text: String,
    pub required_info: Vec<RawInfo>,
}

/// A question whose required list is already canonical; answers come later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionSkeleton {
    pub id: u32,
    pub text: String,
    pub required: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDraft {
    pub schema: StateSchema,
    pub questions: Vec<QuestionSkeleton>,
    pub raw: Vec<RawQuestion>,
}

fn clean(s: &str) -> String {
    s.trim().replace(['|', '='], "_")
}

fn parse_raw(v: &Value) -> Option<RawQuestion> {
    let text = v["question"].as_str()?.trim().to_string();
    let required_info = v["required_info"]
        .as_array()?
        .iter()
        .map(|info| {
            Some(RawInfo {
                info_type: clean(info["info_type"].as_str()?),
                info_choices: info["info_choices"]
                    .as_array()?
                    .iter()
                    .map(|c| c.as_str().map(clean))
                    .collect::<Option<Vec<_>>>()?,
            })
        })
        .collect::<Option<Vec<_>>>()?;
    Some(RawQuestion { text, required_info })
}

fn problem(q: &RawQuestion, per_question: usize) -> Option<String> {
    if q.text.is_empty() {
        return Some("empty question text".into());
    }
    if q.required_info.len() != per_question {
        return Some(format!(
            "{:?} has {} required_info items instead of {per_question}",
            q.text,
            q.required_info.len()
        ));
    }
    let types: BTreeSet<&str> = q.required_info.iter().map(|i| i.info_type.as_str()).collect();
    if types.len() != q.required_info.len() || types.contains("") {
        return Some(format!("{:?} repeats or omits an info_type", q.text));
    }
    for info in &q.required_info {
        let distinct: BTreeSet<&str> = info.info_choices.iter().map(String::as_str).collect();
        if distinct.len() < 2 || distinct.len() != info.info_choices.len() || distinct.contains("") {
            return Some(format!(
                "{:?}: {} needs at least 2 distinct choices",
                q.text, info.info_type
            ));
        }
    }
    None
}

/// Samples `count` usable questions whose texts avoid `avoid`.
fn sample_questions(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    count: usize,
    avoid: &[String],
    extra_feedback: Option<String>,
) -> Result<Vec<RawQuestion>, GenError> {
    let cfg = &g.cfg;
    let mut kept: Vec<RawQuestion> = Vec::new();
    let mut feedback: Vec<String> = extra_feedback.into_iter().collect();
    for _ in 0..g.attempts() {
        let want = count - kept.len();
        let reply = g.ask_json(
            SAMPLE_USER_QUESTIONS,
            vec![
                ("start_date", cfg.start_date.clone()),
                ("user_profile", Genesis::profile(persona)),
                ("num_questions", want.to_string()),
                (
                    "num_total_months",
                    (cfg.n_periods * cfg.period_months as usize).to_string(),
                ),
                ("num_states_per_question", cfg.states_per_question.to_string()),
                ("num_choices_per_state", cfg.num_choices_per_state.to_string()),
                ("prompt_lang", cfg.language.clone()),
            ],
            &feedback,
        )?;
        let items = match &reply {
            Value::Array(a) => a.clone(),
            other => other["questions"].as_array().cloned().unwrap_or_default(),
        };
        let mut issues = Vec::new();
        for item in &items {
            if kept.len() == count {
                break;
            }
            let Some(q) = parse_raw(item) else {
                issues.push("a question did not follow the required format".to_string());
                continue;
            };
            if let Some(p) = problem(&q, cfg.states_per_question) {
                issues.push(p);
            } else if avoid.contains(&q.text) || kept.iter().any(|k| k.text == q.text) {
                issues.push(format!("{:?} duplicates an existing question", q.text));
            } else {
                kept.push(q);
            }
        }
        if kept.len() == count {
            return Ok(kept);
        }
        let mut existing: Vec<&str> = avoid.iter().map(String::as_str).collect();
        existing.extend(kept.iter().map(|q| q.text.as_str()));
        feedback.push(format!(
            "Only {} of the {want} questions were usable ({}). Generate {} new questions that differ from these: {}",
            want - (count - kept.len()),
            if issues.is_empty() {
                "too few returned".to_string()
            } else {
                issues.join("; ")
            },
            count - kept.len(),
            serde_json::to_string(&existing).unwrap_or_default(),
        ));
    }
    Err(GenError::Unverified {
        stage: "questions",
        attempts: g.attempts(),
        detail: format!("only {} of {count} usable questions", kept.len()),
    })
}

/// Maps every raw info type to a canonical name.
fn refine_types(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    raw: &[RawQuestion],
) -> Result<BTreeMap<String, String>, GenError> {
    let reply = g.ask_json(
        REFINE_STATE_SCHEMA,
        vec![
            ("user_profile", Genesis::profile(persona)),
            ("questions_json", pretty(&raw)),
            ("prompt_lang", g.cfg.language.clone()),
        ],
        &[],
    )?;
    let known: BTreeSet<&str> = raw
        .iter()
        .flat_map(|q| q.required_info.iter().map(|i| i.info_type.as_str()))
        .collect();
    let mut aliases = BTreeMap::new();
    if let Value::Object(groups) = &reply {
        for (canonical, originals) in groups {
            let canonical = clean(canonical);
            if canonical.is_empty() {
                continue;
            }
            for orig in originals.as_array().into_iter().flatten().filter_map(Value::as_str) {
                if known.contains(orig) && !aliases.contains_key(orig) {
                    aliases.insert(orig.to_string(), canonical.clone());
                }
            }
        }
    }
    for t in known {
        if !aliases.contains_key(t) {
            tracing::warn!(info_type = t, "refinement left an info type unmapped; keeping it as is");
            aliases.insert(t.to_string(), t.to_string());
        }
    }
    Ok(aliases)
}

fn canonical_required(q: &RawQuestion, aliases: &BTreeMap<String, String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for info in &q.required_info {
        let c = aliases
            .get(&info.info_type)
            .cloned()
            .unwrap_or_else(|| info.info_type.clone());
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn valid_choice_set(list: &[String], n: usize) -> bool {
    let distinct: BTreeSet<&str> = list.iter().map(String::as_str).collect();
    list.len() == n && distinct.len() == n && !distinct.contains("")
}

/// One choice list per canonical variable; conflicting groups go through the
/// fix-schema prompt.
fn unify_choices(
    g: &Genesis<'_>,
    persona: &PersonaRecord,
    raw: &[RawQuestion],
    aliases: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, Vec<String>>, GenError> {
    let n = g.cfg.num_choices_per_state;
    let mut originals: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    let mut lists: BTreeMap<String, BTreeSet<Vec<String>>> = BTreeMap::new();
    let mut contexts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for q in raw {
        for info in &q.required_info {
            let c = &aliases[&info.info_type];
            originals
                .entry(c.clone())
                .or_default()
                .entry(info.info_type.clone())
                .or_insert_with(|| info.info_choices.clone());
            lists.entry(c.clone()).or_default().insert(info.info_choices.clone());
            let ctx = contexts.entry(c.clone()).or_default();
            if !ctx.contains(&q.text) {
                ctx.push(q.text.clone());
            }
        }
    }

    let mut unified = BTreeMap::new();
    let mut conflicts = Map::new();
    for (canonical, set) in &lists {
        let only = set.iter().next().filter(|_| set.len() == 1);
        match only {
            Some(list) if valid_choice_set(list, n) => {
                unified.insert(canonical.clone(), list.clone());
            }
            _ => {
                conflicts.insert(
                    canonical.clone(),
                    json!({
                        "original_info_types": originals[canonical],
                        "questions": contexts[canonical],
                    }),
                );
            }
        }
    }

    let mut feedback = Vec::new();
    for _ in 0..g.attempts() {
        if conflicts.is_empty() {
            return Ok(unified);
        }
        let reply = g.ask_json(
            FIX_SCHEMA,
            vec![
                ("start_date", g.cfg.start_date.clone()),
                ("user_profile", Genesis::profile(persona)),
                ("conflict_groups_json", pretty(&conflicts)),
                (
                    "num_total_months",
                    (g.cfg.n_periods * g.cfg.period_months as usize).to_string(),
                ),
                ("num_choices_per_state", n.to_string()),
                ("prompt_lang", g.cfg.language.clone()),
            ],
            &feedback,
        )?;
        let mut bad = Vec::new();
        for name in conflicts.keys().cloned().collect::<Vec<_>>() {
            let list: Vec<String> = reply[&name]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_str).map(clean).collect())
                .unwrap_or_default();
            if valid_choice_set(&list, n) {
                conflicts.remove(&name);
                unified.insert(name, list);
            } else {
                bad.push(name);
            }
        }
        if !bad.is_empty() {
            feedback.push(format!(
                "Each of these information types needs exactly {n} distinct choices: {}",
                bad.join(", ")
            ));
        }
    }
    if conflicts.is_empty() {
        return Ok(unified);
    }
    Err(GenError::Unverified {
        stage: "schema choices",
        attempts: g.attempts(),
        detail: format!(
            "no valid choice set for {}",
            conflicts.keys().cloned().collect::<Vec<_>>().join(", ")
        ),
    })
}

/// Samples questions, merges their info types into a canonical schema and
/// rewrites each question's requirements onto it.
pub fn generate_schema_and_questions(g: &Genesis<'_>, persona: &PersonaRecord) -> Result<SchemaDraft, GenError> {
    let per_question = g.cfg.states_per_question;
    let mut raw = sample_questions(g, persona, g.cfg.num_questions, &[], None)?;
    let mut regenerated: BTreeSet<usize> = BTreeSet::new();
    let aliases = loop {
        let aliases = refine_types(g, persona, &raw)?;
        let collapsed: Vec<usize> = raw
            .iter()
            .enumerate()
            .filter(|(_, q)| canonical_required(q, &aliases).len() < per_question)
            .map(|(i, _)| i)
            .collect();
        if collapsed.is_empty() {
            break aliases;
        }
        if let Some(i) = collapsed.iter().find(|i| regenerated.contains(i)) {
            return Err(GenError::invalid(
                "schema",
                format!(
                    "question {:?} still needs fewer than {per_question} distinct variables after regeneration",
                    raw[*i].text
                ),
            ));
        }
        tracing::debug!(
            count = collapsed.len(),
            "regenerating questions whose info types merged"
        );
        let avoid: Vec<String> = raw.iter().map(|q| q.text.clone()).collect();
        let hint = format!(
            "The info types within each question must describe clearly different aspects of the user's life; \
             previous questions such as {} asked for overlapping information.",
            serde_json::to_string(&collapsed.iter().map(|&i| &raw[i].text).collect::<Vec<_>>()).unwrap_or_default()
        );
        let fresh = sample_questions(g, persona, collapsed.len(), &avoid, Some(hint))?;
        for (slot, q) in collapsed.into_iter().zip(fresh) {
            raw[slot] = q;
            regenerated.insert(slot);
        }
    };

    let choices = unify_choices(g, persona, &raw, &aliases)?;
    let mut variables: Vec<StateVariable> = Vec::new();
    for q in &raw {
        for name in canonical_required(q, &aliases) {
            if !variables.iter().any(|v| v.name == name) {
                variables.push(StateVariable {
                    choices: choices[&name].clone(),
                    name,
                });
            }
        }
    }
    let schema = StateSchema {
        variables,
        alias_map: aliases.clone(),
    };
    let questions = raw
        .iter()
        .enumerate()
        .map(|(i, q)| QuestionSkeleton {
            id: i as u32 + 1,
            text: q.text.clone(),
            required: schema.in_schema_order(canonical_required(q, &aliases).iter().map(String::as_str)),
        })
        .collect();
    Ok(SchemaDraft { schema, questions, raw })
}
