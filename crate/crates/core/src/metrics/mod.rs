//! Scoring: accuracy, analytic random baseline, upper bound, normalized
//! memory score, and write/read/utilization failure attribution.

mod summary;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::model::{
    state_at, AggregateScores, Blueprint, EpisodeTrace, EvaluationQuestion, FailureLabel, LabelRecord, ModelError,
    PositionDiagnostics, PositionScore, ReportBundle, ReportMetadata,
};

pub use summary::{summarize_runs, RunSummary, Stat, SummaryRow};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("memory score undefined: upper bound {ub} equals random baseline {random}")]
    Undefined { random: f64, ub: f64 },
    #[error("trace does not match blueprint: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("nothing to report")]
    Empty,
}

/// Gap below which the upper bound and the random baseline count as equal.
pub const DEGENERATE_GAP: f64 = 1e-12;

/// `(overall - random) / (ub - random)`; unbounded on both sides.
pub fn memory_score(overall: f64, random: f64, ub: f64) -> Result<f64, MetricsError> {
    let gap = ub - random;
    if gap.abs() <= DEGENERATE_GAP {
        return Err(MetricsError::Undefined { random, ub });
    }
    Ok((overall - random) / gap)
}

/// Mean over questions of `1 / |options at t|`.
pub fn random_baseline(blueprint: &Blueprint, t: usize) -> f64 {
    let sizes: Vec<usize> = blueprint
        .questions
        .iter()
        .map(|q| q.options_at(t).len())
        .filter(|&n| n > 0)
        .collect();
    if sizes.is_empty() {
        return 0.0;
    }
    sizes.iter().map(|&n| 1.0 / n as f64).sum::<f64>() / sizes.len() as f64
}

/// Latest period `<= t` whose updates include `v`, or 0 for the initial exposure.
pub fn write_position(blueprint: &Blueprint, v: &str, t: usize) -> usize {
    (1..=t.min(blueprint.n_periods()))
        .rev()
        .find(|&w| blueprint.periods[w - 1].updates.get(v).is_some())
        .unwrap_or(0)
}

/// Whether each probe answer matched the true state, per position and variable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProbeMatrix {
    correct: BTreeMap<(usize, String), bool>,
}

impl ProbeMatrix {
    pub fn from_trace(trace: &EpisodeTrace, blueprint: &Blueprint) -> Result<Self, MetricsError> {
        let mut correct = BTreeMap::new();
        for entry in &trace.periods {
            let state = state_at(blueprint, entry.position)?;
            for v in blueprint.schema.names() {
                let ok = entry.probe.get(v).and_then(Option::as_deref) == state.get(v);
                correct.insert((entry.position, v.to_string()), ok);
            }
        }
        Ok(ProbeMatrix { correct })
    }

    pub fn set(&mut self, t: usize, v: &str, ok: bool) {
        self.correct.insert((t, v.to_string()), ok);
    }

    /// Missing entries count as incorrect.
    pub fn correct(&self, t: usize, v: &str) -> bool {
        self.correct.get(&(t, v.to_string())).copied().unwrap_or(false)
    }
}

/// Attributes one answer to none / write / read / utilization. When several
/// required variables are wrong, a write failure outranks a read failure.
pub fn classify_failure(
    question: &EvaluationQuestion,
    t: usize,
    answer_correct: bool,
    probes: &ProbeMatrix,
    blueprint: &Blueprint,
) -> FailureLabel {
    if answer_correct {
        return FailureLabel::None;
    }
    let wrong: Vec<&String> = question.required.iter().filter(|v| !probes.correct(t, v)).collect();
    if wrong.is_empty() {
        return FailureLabel::Utilization;
    }
    if wrong
        .iter()
        .any(|v| !probes.correct(write_position(blueprint, v, t), v))
    {
        FailureLabel::Write
    } else {
        FailureLabel::Read
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn check_compatible(trace: &EpisodeTrace, blueprint: &Blueprint) -> Result<(), MetricsError> {
    if trace.blueprint_ref != blueprint.id {
        return Err(MetricsError::Compatibility(format!(
            "trace is for {:?}, blueprint is {:?}",
            trace.blueprint_ref, blueprint.id
        )));
    }
    let positions: Vec<usize> = trace.periods.iter().map(|p| p.position).collect();
    if positions != blueprint.positions().collect::<Vec<_>>() {
        return Err(MetricsError::Compatibility(format!(
            "trace positions {positions:?} do not cover 0..={}",
            blueprint.n_periods()
        )));
    }
    for p in &trace.periods {
        for e in &p.evaluations {
            let q = blueprint
                .question(e.question_id)
                .ok_or_else(|| MetricsError::Compatibility(format!("unknown question {}", e.question_id)))?;
            if q.options_at(p.position) != e.options.as_slice() {
                return Err(MetricsError::Compatibility(format!(
                    "question {} position {}: options differ from blueprint",
                    e.question_id, p.position
                )));
            }
        }
    }
    Ok(())
}

/// Per-position scores, failure rates and labels for one episode.
pub fn aggregate_report(trace: &EpisodeTrace, blueprint: &Blueprint) -> Result<ReportBundle, MetricsError> {
    check_compatible(trace, blueprint)?;
    let probes = ProbeMatrix::from_trace(trace, blueprint)?;
    let mut per_position = Vec::new();
    let mut diagnostics = Vec::new();
    let mut labels = Vec::new();
    for p in &trace.periods {
        let t = p.position;
        let n = p.evaluations.len().max(1) as f64;
        let overall = p.evaluations.iter().filter(|e| e.correct()).count() as f64 / n;
        let ub = p.evaluations.iter().filter(|e| e.ub_correct()).count() as f64 / n;
        let random = random_baseline(blueprint, t);
        per_position.push(PositionScore {
            position: t,
            overall,
            random,
            ub,
            memory: memory_score(overall, random, ub).ok(),
        });
        let mut counts = [0usize; 3];
        for e in &p.evaluations {
            let q = blueprint.question(e.question_id).expect("checked above");
            let label = classify_failure(q, t, e.correct(), &probes, blueprint);
            match label {
                FailureLabel::Write => counts[0] += 1,
                FailureLabel::Read => counts[1] += 1,
                FailureLabel::Utilization => counts[2] += 1,
                FailureLabel::None => {}
            }
            labels.push(LabelRecord {
                position: t,
                question_id: e.question_id,
                label,
            });
        }
        diagnostics.push(PositionDiagnostics {
            position: t,
            write_rate: counts[0] as f64 / n,
            read_rate: counts[1] as f64 / n,
            util_rate: counts[2] as f64 / n,
        });
    }
    let overall = mean(per_position.iter().map(|s| s.overall));
    let random = mean(per_position.iter().map(|s| s.random));
    let ub = mean(per_position.iter().map(|s| s.ub));
    let aggregate = AggregateScores {
        overall,
        random,
        ub,
        memory: memory_score(overall, random, ub).ok(),
        write_rate: mean(diagnostics.iter().map(|d| d.write_rate)),
        read_rate: mean(diagnostics.iter().map(|d| d.read_rate)),
        util_rate: mean(diagnostics.iter().map(|d| d.util_rate)),
    };
    let metadata = ReportMetadata {
        blueprint_ref: blueprint.id.clone(),
        agent_descriptor: trace.agent_descriptor.clone(),
        mode: trace.mode,
        episode_seed: trace.seed,
        blueprint_seed: blueprint.seed,
        question_evaluations: trace.periods.iter().map(|p| p.evaluations.len()).sum(),
        sessions: trace.session_count(),
        rounds: trace.round_count(),
    };
    Ok(ReportBundle {
        per_position,
        diagnostics,
        aggregate,
        labels,
        metadata,
    })
}

pub const CSV_HEADER: &str = "position,overall,random,ub,memory,write_rate,read_rate,util_rate";

pub(crate) fn fmt_num(x: f64) -> String {
    format!("{x:.6}")
}

/// One row per position, fixed column order; an undefined memory score is empty.
pub fn report_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (s, d) in bundle.per_position.iter().zip(&bundle.diagnostics) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.position,
            fmt_num(s.overall),
            fmt_num(s.random),
            fmt_num(s.ub),
            s.memory.map(fmt_num).unwrap_or_default(),
            fmt_num(d.write_rate),
            fmt_num(d.read_rate),
            fmt_num(d.util_rate),
        );
    }
    out
}

#[cfg(test)]
mod tests;
