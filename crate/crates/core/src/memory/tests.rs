use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::*;
use crate::backend::scripted::{ScriptedBackend, ScriptedEmbedder};
use crate::backend::world::{fact_phrase, scripted_world};
use crate::model::fixtures::tiny_blueprint;
use crate::model::{state_at, StateVariable};

struct CountingEmbedder {
    inner: ScriptedEmbedder,
    calls: Arc<AtomicUsize>,
}

impl EmbeddingBackend for CountingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(texts)
    }
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn descriptor(&self) -> String {
        "counting".into()
    }
}

fn agent(cfg: AgentConfig, chat: ScriptedBackend) -> MemoryAgent {
    MemoryAgent::new(
        cfg,
        Arc::new(chat),
        Some(Arc::new(ScriptedEmbedder::new(0))),
        Arc::new(PromptRegistry::standard()),
    )
    .unwrap()
}

/// Replies to the in-context update prompt with the prompt's own examples.
fn awi_examples() -> ScriptedBackend {
    ScriptedBackend::new(0)
        .rule(MEMORY_UPDATE_AWI, |req, _| {
            let text = req.last_content();
            let convo = &text[text.rfind("Conversation:\n").unwrap_or(0)..];
            Ok(if convo.contains("my name is John") {
                r#"{"basic_profile": "Name is John, a software engineer"}"#.into()
            } else if convo.contains("food is sushi") {
                r#"{"food": "Favourite food is sushi"}"#.into()
            } else if convo.contains("food is pizza") {
                r#"{"food": "Favourite food is pizza"}"#.into()
            } else {
                "{}".into()
            })
        })
        .reply(ASSISTANT_RESPOND, "Sure.")
}

fn awi(freq: usize, ns: usize) -> MemoryAgent {
    agent(
        AgentConfig::new(AgentKind::Awi).with_params(freq, ns, 0),
        awi_examples(),
    )
}

#[test]
fn awi_greeting_leaves_store_empty() {
    let mut a = awi(1, 0);
    a.respond("Hi.").unwrap();
    assert!(a.facts().is_empty());
    assert_eq!(a.stats().write_calls, 1);
}

#[test]
fn awi_records_profile_example() {
    let mut a = awi(1, 0);
    a.respond("Hi, my name is John. I am a software engineer.").unwrap();
    assert_eq!(
        a.facts().get("basic_profile").map(String::as_str),
        Some("Name is John, a software engineer")
    );
}

#[test]
fn awi_update_overwrites_key() {
    let mut a = awi(1, 0);
    a.respond("My favourite food is pizza.").unwrap();
    assert_eq!(a.facts()["food"], "Favourite food is pizza");
    a.respond("These days my favourite food is sushi.").unwrap();
    assert_eq!(a.facts()["food"], "Favourite food is sushi");
    assert_eq!(a.facts().len(), 1);
}

#[test]
fn merging_empty_update_changes_nothing() {
    let mut facts: BTreeMap<String, String> = [("a".to_string(), "x".to_string())].into_iter().collect();
    let before = facts.clone();
    merge_facts(&mut facts, &json!({}));
    assert_eq!(facts, before);
}

#[test]
fn update_cycles_follow_freq() {
    let mut a = agent(
        AgentConfig::new(AgentKind::Awe).with_params(2, 0, 30),
        scripted_world(1),
    );
    for i in 0..10 {
        a.respond(&format!("round {i}")).unwrap();
    }
    assert_eq!(a.stats().update_cycles, 5);
    assert_eq!(a.stats().write_calls, 5);
    assert_eq!(a.short_term_len(), 0);

    let mut b = agent(
        AgentConfig::new(AgentKind::Awe).with_params(3, 4, 30),
        scripted_world(1),
    );
    for i in 0..10 {
        b.respond(&format!("round {i}")).unwrap();
    }
    assert_eq!(b.stats().update_cycles, 3);
}

#[test]
fn rag_flush_keeps_every_round_exactly_once() {
    let mut a = agent(
        AgentConfig::new(AgentKind::Rag).with_params(2, 3, 30),
        scripted_world(2),
    );
    let msgs: Vec<String> = (0..9).map(|i| format!("message number {i}")).collect();
    for m in &msgs {
        a.respond(m).unwrap();
    }
    let indexed: Vec<&str> = a.index().entries().iter().map(|e| e.text.as_str()).collect();
    let dump = a.memory_dump();
    let short: Vec<&str> = dump["short_term"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(short.len() >= 3);
    assert_eq!(indexed.len() + short.len(), 9);
    for m in &msgs {
        let hits = indexed
            .iter()
            .chain(short.iter())
            .filter(|t| t.starts_with(&format!("User: {m}\n")))
            .count();
        assert_eq!(hits, 1, "{m}");
    }
}

#[test]
fn awi_never_embeds() {
    let calls = Arc::new(AtomicUsize::new(0));
    let embed = CountingEmbedder {
        inner: ScriptedEmbedder::new(0),
        calls: calls.clone(),
    };
    let mut a = MemoryAgent::new(
        AgentConfig::new(AgentKind::Awi),
        Arc::new(scripted_world(0)),
        Some(Arc::new(embed)),
        Arc::new(PromptRegistry::standard()),
    )
    .unwrap();
    let bp = tiny_blueprint();
    for i in 0..6 {
        a.respond(&format!(
            "Note: {}",
            fact_phrase("work_location", if i % 2 == 0 { "home" } else { "office" })
        ))
        .unwrap();
    }
    a.evaluate(&bp.questions[0], &bp.questions[0].option_texts(0)).unwrap();
    a.probe(&bp.schema).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[test]
fn llm_context_is_whole_transcript() {
    let seen = Arc::new(AtomicUsize::new(0));
    let s = seen.clone();
    let chat = ScriptedBackend::new(0).rule(ASSISTANT_RESPOND, move |req, _| {
        s.store(req.messages.len(), Ordering::SeqCst);
        Ok("ok".into())
    });
    let calls = Arc::new(AtomicUsize::new(0));
    let embed = CountingEmbedder {
        inner: ScriptedEmbedder::new(0),
        calls: calls.clone(),
    };
    let mut a = MemoryAgent::new(
        AgentConfig::new(AgentKind::Llm),
        Arc::new(chat),
        Some(Arc::new(embed)),
        Arc::new(PromptRegistry::standard()),
    )
    .unwrap();
    for i in 0..5 {
        a.respond(&format!("m{i}")).unwrap();
    }
    // preamble + 4 earlier rounds + current message
    assert_eq!(seen.load(Ordering::SeqCst), 1 + 8 + 1);
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(a.stats().write_calls, 0);
}

#[test]
fn llm_overflow_drops_oldest_rounds() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let s = seen.clone();
    let chat = ScriptedBackend::new(0).rule(ASSISTANT_RESPOND, move |req, _| {
        *s.lock().unwrap() = req.messages.iter().map(|m| m.content.clone()).collect();
        Ok("ok".into())
    });
    let mut cfg = AgentConfig::new(AgentKind::Llm);
    cfg.max_context_tokens = Some(80);
    let mut a = MemoryAgent::new(cfg, Arc::new(chat), None, Arc::new(PromptRegistry::standard())).unwrap();
    for i in 0..10 {
        a.respond(&format!("message {i} {}", "x".repeat(40))).unwrap();
    }
    let last = seen.lock().unwrap().clone();
    assert!(a.stats().overflow_events > 0);
    assert!(!last.iter().any(|c| c.starts_with("message 0 ")));
    assert!(last.last().unwrap().starts_with("message 9 "));
}

#[test]
fn awe_extraction_failure_keeps_rounds() {
    let chat = ScriptedBackend::new(0)
        .reply(ASSISTANT_RESPOND, "ok")
        .reply(MEMORY_EXTRACT_AWE, "no json here");
    let mut a = agent(AgentConfig::new(AgentKind::Awe).with_params(1, 0, 5), chat);
    a.respond("hello").unwrap();
    assert_eq!(a.short_term_len(), 1);
    assert_eq!(a.stats().write_failures, 1);
    assert!(a.index().is_empty());
}

#[test]
fn awe_suppresses_exact_duplicates() {
    let mut a = agent(
        AgentConfig::new(AgentKind::Awe).with_params(1, 0, 30),
        scripted_world(3),
    );
    let fact = fact_phrase("diet", "vegan_diet");
    a.respond(&format!("Hello, {fact}")).unwrap();
    a.respond(&format!("Again, {fact}")).unwrap();
    assert_eq!(a.index().len(), 1);
    assert_eq!(a.index().entries()[0].text, fact);
}

#[test]
fn choice_parsing() {
    assert_eq!(parse_choice("```json\n{\"answer\": 3}\n```", 5), Some(2));
    assert_eq!(parse_choice("{\"answer\": \"1\"}", 5), Some(0));
    assert_eq!(parse_choice("{\"answer\": 6}", 5), None);
    assert_eq!(parse_choice("{\"answer\": 0}", 5), None);
    assert_eq!(parse_choice("I think the second one.", 5), None);
}

#[test]
fn probe_marks_missing_and_illegal_values_unknown() {
    let schema = StateSchema {
        variables: vec![
            StateVariable {
                name: "a".into(),
                choices: vec!["x".into(), "y".into()],
            },
            StateVariable {
                name: "b".into(),
                choices: vec!["p".into(), "q".into()],
            },
            StateVariable {
                name: "c".into(),
                choices: vec!["m".into()],
            },
        ],
        alias_map: Default::default(),
    };
    let probe = parse_probe(r#"{"a": "y", "b": "zzz"}"#, &schema);
    assert_eq!(probe["a"].as_deref(), Some("y"));
    assert_eq!(probe["b"], None);
    assert_eq!(probe["c"], None);
}

#[test]
fn evaluation_battery_leaves_stores_untouched() {
    let bp = tiny_blueprint();
    for kind in [AgentKind::Llm, AgentKind::Rag, AgentKind::Awe, AgentKind::Awi] {
        let mut a = agent(AgentConfig::new(kind).with_params(1, 1, 5), scripted_world(4));
        for (k, v) in state_at(&bp, 0).unwrap().iter() {
            a.respond(&format!("FYI {}", fact_phrase(k, v))).unwrap();
        }
        let before = a.memory_fingerprint();
        let dump = a.memory_dump();
        for q in &bp.questions {
            a.evaluate(q, &q.option_texts(0)).unwrap();
            let truth = state_at(&bp, 0)
                .unwrap()
                .restrict(q.required.iter().map(String::as_str));
            a.evaluate_with_truth(q, &q.option_texts(0), &truth).unwrap();
        }
        a.probe(&bp.schema).unwrap();
        assert_eq!(a.memory_fingerprint(), before, "{kind}");
        assert_eq!(a.memory_dump(), dump, "{kind}");
    }
}

#[test]
fn scripted_awe_recalls_latest_value() {
    let bp = tiny_blueprint();
    let mut a = agent(
        AgentConfig::new(AgentKind::Awe).with_params(1, 0, 30),
        scripted_world(5),
    );
    a.respond(&format!("Hi, {}", fact_phrase("work_location", "home")))
        .unwrap();
    a.respond(&format!("Hi, {}", fact_phrase("work_schedule", "flexible")))
        .unwrap();
    a.respond(&format!("Update: {}", fact_phrase("work_location", "office")))
        .unwrap();
    let probe = a.probe(&bp.schema).unwrap();
    assert_eq!(probe["work_location"].as_deref(), Some("office"));
    assert_eq!(probe["work_schedule"].as_deref(), Some("flexible"));
}

#[test]
fn replay_ingestion_pairs_rounds() {
    let mut a = agent(AgentConfig::new(AgentKind::Rag).with_params(1, 0, 5), scripted_world(6));
    a.ingest_replay(&[
        Message::user("u1"),
        Message::assistant("a1"),
        Message::user("u2"),
        Message::assistant("a2"),
    ])
    .unwrap();
    let texts: Vec<&str> = a.index().entries().iter().map(|e| e.text.as_str()).collect();
    assert_eq!(texts, ["User: u1\nAssistant: a1", "User: u2\nAssistant: a2"]);
}

#[test]
fn descriptors() {
    assert_eq!(AgentConfig::new(AgentKind::Awe).descriptor(), "awe-(2,4,30)");
    assert_eq!(AgentConfig::new(AgentKind::Llm).descriptor(), "llm");
    assert!("bogus".parse::<AgentKind>().is_err());
    assert!(AgentConfig::new(AgentKind::Rag).with_params(0, 0, 0).check().is_err());
}

#[test]
fn document_from_dumps() {
    let dump = json!({"store": {"diet": "my diet is vegan diet."}});
    assert_eq!(memory_document(&dump), "diet: my diet is vegan diet.");
    let dump = json!({"store": [{"id": 0, "text": "a"}, {"id": 1, "text": "b"}]});
    assert_eq!(memory_document(&dump), "a\nb");
}
