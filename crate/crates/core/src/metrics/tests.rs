use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::arena::{run_episode, Interaction, OracleAssistant, RandomAssistant, UserSimulator};
use crate::backend::world::scripted_world;
use crate::backend::PromptRegistry;
use crate::model::fixtures::{assignment, tiny_blueprint};
use crate::model::{PeriodPlan, VariantKey};
use crate::rng::rng_for;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn memory_score_examples() {
    assert!(close(memory_score(0.8, 0.2, 0.8).unwrap(), 1.0));
    assert!(close(memory_score(0.2, 0.2, 0.8).unwrap(), 0.0));
    assert!(close(memory_score(0.5, 0.2, 0.8).unwrap(), 0.5));
    assert!(memory_score(0.5, 0.3, 0.3).is_err());
    assert!(memory_score(0.1, 0.2, 0.8).unwrap() < 0.0);
}

proptest! {
    #[test]
    fn memory_score_shift(o in 0.0f64..1.0, r in 0.0f64..0.5, u in 0.5f64..1.0, c in -0.3f64..0.3) {
        prop_assume!((u - r).abs() > 1e-6 && (u + c - r).abs() > 1e-6);
        let shifted = memory_score(o + c, r, u + c).unwrap();
        prop_assert!((shifted - (o + c - r) / (u + c - r)).abs() < 1e-12);
    }
}

fn with_option_counts(counts: &[usize]) -> Blueprint {
    let mut bp = tiny_blueprint();
    let template = bp.questions[0].clone();
    bp.questions = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut q = template.clone();
            q.id = i as u32;
            q.options = vec![(0..n).map(|k| VariantKey(format!("v={k}"))).collect(); 3];
            q
        })
        .collect();
    bp
}

#[test]
fn random_baseline_examples() {
    assert!(close(random_baseline(&with_option_counts(&[5; 10]), 0), 0.2));
    assert!(close(random_baseline(&with_option_counts(&[4, 4, 5, 5]), 1), 0.225));
}

#[test]
fn random_baseline_matches_simulation() {
    let counts = [4, 5, 6, 7, 4, 7];
    let bp = with_option_counts(&counts);
    let mut rng = rng_for(0, "baseline-mc");
    let draws = 10_000;
    let mut hits = 0usize;
    for i in 0..draws {
        let n = counts[i % counts.len()];
        if rng.random_range(0..n) == 0 {
            hits += 1;
        }
    }
    let empirical = hits as f64 / draws as f64;
    assert!((empirical - random_baseline(&bp, 0)).abs() < 0.02);
}

fn long_blueprint(n: usize, updates: &[(usize, &str, &str)]) -> Blueprint {
    let mut bp = tiny_blueprint();
    bp.periods = (1..=n)
        .map(|i| PeriodPlan {
            index: i,
            summary: String::new(),
            updates: assignment(
                &updates
                    .iter()
                    .filter(|(p, _, _)| *p == i)
                    .map(|(_, k, v)| (*k, *v))
                    .collect::<Vec<_>>(),
            ),
            events: vec![],
            update_queries: vec![],
        })
        .collect();
    bp
}

#[test]
fn write_position_examples() {
    let bp = long_blueprint(8, &[(2, "diet", "omnivore"), (5, "diet", "vegan")]);
    assert_eq!(write_position(&bp, "work_location", 7), 0);
    assert_eq!(write_position(&bp, "diet", 7), 5);
    assert_eq!(write_position(&bp, "diet", 3), 2);
    assert_eq!(write_position(&bp, "diet", 1), 0);
    for t in 0..=8 {
        assert!(write_position(&bp, "diet", t) <= t);
    }
}

#[test]
fn classification_examples() {
    let bp = long_blueprint(4, &[(2, "work_location", "office")]);
    let q = &bp.questions[0]; // work_location, work_schedule
    let mut probes = ProbeMatrix::default();
    for t in 0..=4 {
        probes.set(t, "work_location", true);
        probes.set(t, "work_schedule", true);
    }
    assert_eq!(classify_failure(q, 3, true, &probes, &bp), FailureLabel::None);
    assert_eq!(classify_failure(q, 3, false, &probes, &bp), FailureLabel::Utilization);
    probes.set(3, "work_location", false);
    assert_eq!(classify_failure(q, 3, false, &probes, &bp), FailureLabel::Read);
    probes.set(2, "work_location", false);
    assert_eq!(classify_failure(q, 3, false, &probes, &bp), FailureLabel::Write);
    // a read-type variable next to a write-type one: write wins
    probes.set(3, "work_schedule", false);
    assert_eq!(classify_failure(q, 3, false, &probes, &bp), FailureLabel::Write);
}

fn user() -> UserSimulator {
    UserSimulator::new(Arc::new(scripted_world(0)), Arc::new(PromptRegistry::standard()))
}

#[test]
fn oracle_report_is_perfect() {
    let bp = tiny_blueprint();
    let trace = run_episode(&bp, &mut OracleAssistant::new(), Interaction::OnPolicy(&user()), 0).unwrap();
    let report = aggregate_report(&trace, &bp).unwrap();
    for s in &report.per_position {
        assert_eq!((s.overall, s.ub), (1.0, 1.0));
        assert!(close(s.memory.unwrap(), 1.0));
    }
    assert!(report
        .diagnostics
        .iter()
        .all(|d| d.write_rate + d.read_rate + d.util_rate == 0.0));
    assert_eq!(report.metadata.question_evaluations, 6);
    assert_eq!(report, aggregate_report(&trace, &bp).unwrap());
}

#[test]
fn failure_rates_partition_errors() {
    let bp = tiny_blueprint();
    for seed in 0..5 {
        let trace = run_episode(
            &bp,
            &mut RandomAssistant::new(seed),
            Interaction::OnPolicy(&user()),
            seed,
        )
        .unwrap();
        let report = aggregate_report(&trace, &bp).unwrap();
        for (s, d) in report.per_position.iter().zip(&report.diagnostics) {
            assert!(close(d.write_rate + d.read_rate + d.util_rate, 1.0 - s.overall));
            assert!((0.0..=1.0).contains(&s.overall) && (0.0..=1.0).contains(&s.ub));
        }
        assert_eq!(report.labels.len(), 6);
    }
}

#[test]
fn mismatched_trace_rejected() {
    let bp = tiny_blueprint();
    let mut trace = run_episode(&bp, &mut OracleAssistant::new(), Interaction::OnPolicy(&user()), 0).unwrap();
    trace.periods.pop();
    assert!(matches!(
        aggregate_report(&trace, &bp),
        Err(MetricsError::Compatibility(_))
    ));
}

#[test]
fn csv_has_one_row_per_position() {
    let bp = tiny_blueprint();
    let trace = run_episode(&bp, &mut OracleAssistant::new(), Interaction::OnPolicy(&user()), 0).unwrap();
    let csv = report_csv(&aggregate_report(&trace, &bp).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(
        lines[1],
        "0,1.000000,0.250000,1.000000,1.000000,0.000000,0.000000,0.000000"
    );
}

#[test]
fn sample_stdev_across_runs() {
    assert_eq!(
        Stat::of(&[1.0, 2.0, 3.0]),
        Some(Stat {
            mean: 2.0,
            std: Some(1.0)
        })
    );
    assert_eq!(Stat::of(&[4.0]), Some(Stat { mean: 4.0, std: None }));
    let bp = tiny_blueprint();
    let report = |seed| {
        let trace = run_episode(
            &bp,
            &mut RandomAssistant::new(seed),
            Interaction::OnPolicy(&user()),
            seed,
        )
        .unwrap();
        aggregate_report(&trace, &bp).unwrap()
    };
    let runs: Vec<Vec<ReportBundle>> = (0..5).map(|s| vec![report(s), report(s + 10)]).collect();
    let summary = summarize_runs(&runs).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert_eq!((summary.runs, summary.users), (5, 2));
    assert!(summary.rows.iter().all(|r| r.overall.std.is_some()));
    let csv = summary.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("all,"));
    assert!(summarize_runs(&[]).is_err());
}
