use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use super::{Evolution, Exposure, GenError, VariantAnswers};
use crate::model::{
    validate_blueprint, Blueprint, EvaluationQuestion, GenConfig, ModelError, PersonaRecord, StateAssignment,
    StateSchema, VariantKey,
};
use crate::rng::rng_for;

/// Outputs of the generation stages, ready to be frozen into a blueprint.
#[derive(Debug, Clone)]
pub struct BlueprintParts {
    pub id: String,
    pub persona: PersonaRecord,
    pub schema: StateSchema,
    pub evolution: Evolution,
    pub exposure: Exposure,
    pub questions: Vec<VariantAnswers>,
    pub config: GenConfig,
}

/// Option lists for every position. With at most `cap` variants all of them
/// are offered; otherwise the ground truth plus uniformly drawn distractors.
/// Either way the order is shuffled with a seed keyed on question and position.
pub fn materialize_options(
    question_id: u32,
    required: &[String],
    variants: &BTreeMap<VariantKey, String>,
    states: &[StateAssignment],
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<VariantKey>>, ModelError> {
    let all: Vec<&VariantKey> = variants.keys().collect();
    states
        .iter()
        .enumerate()
        .map(|(t, state)| {
            let mut rng = rng_for(seed, &format!("options/q{question_id}/t{t}"));
            let truth = VariantKey::from_state(required, state)?;
            if !variants.contains_key(&truth) {
                return Err(ModelError::Integrity(format!(
                    "question {question_id}: no answer for ground truth {truth}"
                )));
            }
            let mut opts: Vec<VariantKey> = if all.len() <= cap {
                all.iter().map(|k| (*k).clone()).collect()
            } else {
                let others: Vec<&VariantKey> = all.iter().copied().filter(|k| **k != truth).collect();
                let mut picked: Vec<VariantKey> = others
                    .choose_multiple(&mut rng, cap.saturating_sub(1))
                    .map(|k| (*k).clone())
                    .collect();
                picked.push(truth);
                picked
            };
            opts.shuffle(&mut rng);
            Ok(opts)
        })
        .collect()
}

/// Freezes the generated parts into a validated blueprint.
pub fn assemble_blueprint(parts: BlueprintParts, seed: u64) -> Result<Blueprint, GenError> {
    let BlueprintParts {
        id,
        persona,
        schema,
        evolution,
        exposure,
        questions,
        config,
    } = parts;
    if exposure.update_queries.len() != evolution.periods.len() {
        return Err(GenError::invalid(
            "assemble",
            format!(
                "{} periods but {} update-query groups",
                evolution.periods.len(),
                exposure.update_queries.len()
            ),
        ));
    }
    let periods = evolution
        .periods
        .into_iter()
        .zip(exposure.update_queries)
        .map(|(mut plan, queries)| {
            plan.update_queries = queries;
            plan
        })
        .collect::<Vec<_>>();

    let mut states = vec![evolution.initial_state.clone()];
    for p in &periods {
        let next = states[states.len() - 1].overlay(&p.updates);
        states.push(next);
    }

    let mut evaluation = Vec::with_capacity(questions.len());
    for va in questions {
        let q = va.question;
        let required = schema.in_schema_order(q.required.iter().map(String::as_str));
        let options = materialize_options(
            q.id,
            &required,
            &va.variants,
            &states,
            config.max_options_per_question,
            seed,
        )?;
        evaluation.push(EvaluationQuestion {
            id: q.id,
            text: q.text,
            required,
            variants: va.variants,
            options,
        });
    }

    let bp = Blueprint {
        id,
        persona,
        schema,
        initial_state: evolution.initial_state,
        periods,
        initial_queries: exposure.initial_queries,
        questions: evaluation,
        start_date: config.start_date.clone(),
        config,
        seed,
    };
    let violations = validate_blueprint(&bp);
    if !violations.is_empty() {
        return Err(GenError::Validation(violations));
    }
    Ok(bp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::assignment;
    use crate::model::{variant_space, StateVariable};
    use std::collections::BTreeSet;

    fn schema(choices: usize) -> StateSchema {
        let var = |name: &str| StateVariable {
            name: name.into(),
            choices: (0..choices).map(|i| format!("{name}_c{i}")).collect(),
        };
        StateSchema {
            variables: vec![var("a"), var("b")],
            alias_map: BTreeMap::new(),
        }
    }

    fn variants(s: &StateSchema) -> BTreeMap<VariantKey, String> {
        variant_space(s, &["a".into(), "b".into()])
            .unwrap()
            .into_iter()
            .map(|k| {
                let text = format!("answer for {k}");
                (k, text)
            })
            .collect()
    }

    fn states(n: usize) -> Vec<StateAssignment> {
        (0..n)
            .map(|t| {
                let b = format!("b_c{}", t % 2);
                assignment(&[("a", "a_c1"), ("b", b.as_str())])
            })
            .collect()
    }

    #[test]
    fn small_space_offers_everything() {
        let s = schema(2);
        let v = variants(&s);
        let req = vec!["a".to_string(), "b".to_string()];
        let opts = materialize_options(0, &req, &v, &states(5), 7, 9).unwrap();
        for o in &opts {
            assert_eq!(o.len(), 4);
            assert_eq!(o.iter().collect::<BTreeSet<_>>(), v.keys().collect());
        }
        assert_eq!(opts, materialize_options(0, &req, &v, &states(5), 7, 9).unwrap());
    }

    #[test]
    fn large_space_is_capped_and_contains_truth() {
        let s = schema(3);
        let v = variants(&s);
        let req = vec!["a".to_string(), "b".to_string()];
        let st = states(12);
        let opts = materialize_options(3, &req, &v, &st, 7, 1).unwrap();
        for (t, o) in opts.iter().enumerate() {
            assert_eq!(o.len(), 7);
            assert_eq!(o.iter().collect::<BTreeSet<_>>().len(), 7);
            let truth = VariantKey::from_state(&req, &st[t]).unwrap();
            assert!(o.contains(&truth));
        }
        assert!((4..=7).contains(&opts[0].len()));
    }
}
