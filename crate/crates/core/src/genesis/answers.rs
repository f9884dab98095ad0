use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use super::{compact, pretty, GenError, Genesis, QuestionSkeleton, VerifierOutcome};
use crate::backend::json::extract_integer;
use crate::backend::prompts::{
    numbered_options, CHECK_PERSONALIZED_ANSWER, REFINE_PERSONALIZED_ANSWER, SAMPLE_PERSONALIZED_ANSWERS,
};
use crate::model::{variant_space, StateSchema, VariantKey};

/// A question with one classifier-verified answer per state variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantAnswers {
    pub question: QuestionSkeleton,
    pub variants: BTreeMap<VariantKey, String>,
    pub outcomes: Vec<VerifierOutcome>,
}

fn variant_json(key: &VariantKey) -> Value {
    Value::Object(
        key.pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect(),
    )
}

/// Asks the classifier which variant `answer` was written for (1-based).
fn classify(g: &Genesis<'_>, question: &str, answer: &str, choices: &str) -> Result<Option<usize>, GenError> {
    let text = g.ask_text(
        CHECK_PERSONALIZED_ANSWER,
        vec![
            ("question", question.to_string()),
            ("answer", answer.to_string()),
            ("choices", choices.to_string()),
        ],
        &[],
    )?;
    Ok(extract_integer(&text).and_then(|n| usize::try_from(n).ok()))
}

fn sample_answers(
    g: &Genesis<'_>,
    q: &QuestionSkeleton,
    schema: &StateSchema,
    keys: &[VariantKey],
) -> Result<Vec<String>, GenError> {
    let variants_text = keys
        .iter()
        .enumerate()
        .map(|(i, k)| format!("variant_{}: {}", i + 1, compact(&variant_json(k))))
        .collect::<Vec<_>>()
        .join("\n");
    let mut feedback = Vec::new();
    for _ in 0..g.attempts() {
        let reply = g.ask_json(
            SAMPLE_PERSONALIZED_ANSWERS,
            vec![
                ("question", q.text.clone()),
                (
                    "required_info_types",
                    pretty(&schema.subset_json(q.required.iter().map(String::as_str))),
                ),
                ("variants_text", variants_text.clone()),
            ],
            &feedback,
        )?;
        let answers: Vec<String> = (1..=keys.len())
            .map(|i| reply[format!("variant_{i}")].as_str().unwrap_or("").trim().to_string())
            .collect();
        let missing: Vec<String> = answers
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_empty())
            .map(|(i, _)| format!("variant_{}", i + 1))
            .collect();
        if missing.is_empty() {
            return Ok(answers);
        }
        feedback.push(format!("Provide a non-empty answer for: {}.", missing.join(", ")));
    }
    Err(GenError::invalid(
        "variant answers",
        format!("question {}: answers missing after {} attempts", q.id, g.attempts()),
    ))
}

/// Verified answers keyed by variant, with the verifier log.
type Accepted = (BTreeMap<VariantKey, String>, Vec<VerifierOutcome>);

/// One full attempt at the answer set; `None` when some variant could not be
/// made identifiable or two answers coincide.
fn answer_set(
    g: &Genesis<'_>,
    q: &QuestionSkeleton,
    schema: &StateSchema,
    keys: &[VariantKey],
) -> Result<Option<Accepted>, GenError> {
    let drafts = sample_answers(g, q, schema, keys)?;
    let choices = numbered_options(&keys.iter().map(|k| compact(&variant_json(k))).collect::<Vec<_>>());
    let mut variants = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(keys.len());
    for (i, (key, draft)) in keys.iter().zip(drafts).enumerate() {
        let mut answer = draft;
        let mut outcome = VerifierOutcome {
            accepted: false,
            attempts: g.attempts(),
            last_prediction: String::new(),
        };
        for attempt in 1..=g.attempts() {
            let predicted = classify(g, &q.text, &answer, &choices)?;
            outcome.last_prediction = predicted.map(|n| n.to_string()).unwrap_or_default();
            if predicted == Some(i + 1) {
                outcome.accepted = true;
                outcome.attempts = attempt;
                break;
            }
            if attempt == g.attempts() {
                break;
            }
            let others = keys
                .iter()
                .filter(|k| *k != key)
                .map(|k| compact(&variant_json(k)))
                .collect::<Vec<_>>()
                .join("\n");
            let refined = g.ask_json(
                REFINE_PERSONALIZED_ANSWER,
                vec![
                    ("question", q.text.clone()),
                    ("matched_state", pretty(&variant_json(key))),
                    ("other_states_text", others),
                    ("answer", answer.clone()),
                ],
                &[],
            )?;
            if let Some(a) = refined["answer"].as_str().map(str::trim).filter(|a| !a.is_empty()) {
                answer = a.to_string();
            }
        }
        if !outcome.accepted {
            tracing::debug!(question = q.id, variant = %key, "variant answer unresolvable");
            return Ok(None);
        }
        outcomes.push(outcome);
        variants.insert(key.clone(), answer);
    }
    let distinct: BTreeSet<&String> = variants.values().collect();
    if distinct.len() != variants.len() {
        tracing::debug!(question = q.id, "duplicate variant answers");
        return Ok(None);
    }
    Ok(Some((variants, outcomes)))
}

/// Generates and verifies an answer for every variant of `q`. The whole set
/// is regenerated once if any variant fails; a second failure is an error.
pub fn generate_variant_answers(
    g: &Genesis<'_>,
    q: &QuestionSkeleton,
    schema: &StateSchema,
) -> Result<VariantAnswers, GenError> {
    let keys = variant_space(schema, &q.required)?;
    for round in 0..2 {
        if let Some((variants, outcomes)) = answer_set(g, q, schema, &keys)? {
            return Ok(VariantAnswers {
                question: q.clone(),
                variants,
                outcomes,
            });
        }
        tracing::info!(question = q.id, round, "regenerating variant answers");
    }
    Err(GenError::Unverified {
        stage: "variant answers",
        attempts: g.attempts(),
        detail: format!(
            "question {} ({:?}) has variants the classifier cannot recover",
            q.id, q.text
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::scripted::ScriptedBackend;
    use crate::backend::world::scripted_world;
    use crate::backend::PromptRegistry;
    use crate::model::{GenConfig, StateVariable};

    fn schema() -> StateSchema {
        StateSchema {
            variables: vec![
                StateVariable {
                    name: "work_location".into(),
                    choices: vec!["home_office".into(), "full_time_office".into()],
                },
                StateVariable {
                    name: "diet".into(),
                    choices: vec!["vegan_diet".into(), "omnivore_diet".into()],
                },
            ],
            alias_map: Default::default(),
        }
    }

    fn question() -> QuestionSkeleton {
        QuestionSkeleton {
            id: 0,
            text: "How should I plan lunches?".into(),
            required: vec!["work_location".into(), "diet".into()],
        }
    }

    #[test]
    fn four_variants_all_recovered() {
        let backend = scripted_world(2);
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, GenConfig::base());
        let va = generate_variant_answers(&g, &question(), &schema()).unwrap();
        assert_eq!(va.variants.len(), 4);
        let distinct: BTreeSet<_> = va.variants.values().collect();
        assert_eq!(distinct.len(), 4);
        assert!(va.outcomes.iter().all(|o| o.accepted));

        // Re-classifying with the same backend reproduces every key.
        let keys = variant_space(&schema(), &question().required).unwrap();
        let choices = numbered_options(&keys.iter().map(|k| compact(&variant_json(k))).collect::<Vec<_>>());
        for (i, k) in keys.iter().enumerate() {
            let got = classify(&g, &question().text, &va.variants[k], &choices).unwrap();
            assert_eq!(got, Some(i + 1));
        }
    }

    #[test]
    fn wrong_index_once_then_refined() {
        let backend = ScriptedBackend::new(0)
            .reply(
                SAMPLE_PERSONALIZED_ANSWERS,
                r#"{"variant_1": "a", "variant_2": "b", "variant_3": "c", "variant_4": "d"}"#,
            )
            .rule(CHECK_PERSONALIZED_ANSWER, |req, _| {
                let text = req.last_content();
                let answer = text.split("**Answer to Evaluate:**\n").nth(1).unwrap_or("");
                let n = match answer.chars().next() {
                    Some('a') => 2,
                    Some('b') => 2,
                    Some('c') => 3,
                    Some('d') => 4,
                    _ => 1,
                };
                Ok(n.to_string())
            })
            .reply(REFINE_PERSONALIZED_ANSWER, r#"{"answer": "refined"}"#);
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, GenConfig::base());
        let va = generate_variant_answers(&g, &question(), &schema()).unwrap();
        assert_eq!(va.outcomes[0].attempts, 2);
        assert_eq!(va.outcomes[1].attempts, 1);
        let first = &variant_space(&schema(), &question().required).unwrap()[0];
        assert_eq!(va.variants[first], "refined");
    }

    #[test]
    fn unresolvable_variant_fails_after_one_regeneration() {
        let backend = ScriptedBackend::new(0)
            .reply(
                SAMPLE_PERSONALIZED_ANSWERS,
                r#"{"variant_1": "a", "variant_2": "b", "variant_3": "c", "variant_4": "d"}"#,
            )
            .reply(CHECK_PERSONALIZED_ANSWER, "1")
            .reply(REFINE_PERSONALIZED_ANSWER, r#"{"answer": "same"}"#);
        let prompts = PromptRegistry::standard();
        let g = Genesis::new(&backend, &prompts, GenConfig::base());
        let err = generate_variant_answers(&g, &question(), &schema()).unwrap_err();
        assert!(matches!(
            err,
            GenError::Unverified {
                stage: "variant answers",
                ..
            }
        ));
    }
}
