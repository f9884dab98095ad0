use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{fmt_num, mean, memory_score, MetricsError};
use crate::model::ReportBundle;

/// Mean and sample standard deviation across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// `None` with fewer than two runs.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let m = mean(xs.iter().copied());
        let std =
            (xs.len() > 1).then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt());
        Some(Stat { mean: m, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `None` for the all-positions row.
    pub position: Option<usize>,
    pub overall: Stat,
    pub random: Stat,
    pub ub: Stat,
    pub memory: Option<Stat>,
    pub write_rate: Stat,
    pub read_rate: Stat,
    pub util_rate: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub users: usize,
    pub agents: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

/// Per-run values of one row: users are averaged with equal weight.
#[derive(Default)]
struct RowValues {
    overall: Vec<f64>,
    random: Vec<f64>,
    ub: Vec<f64>,
    memory: Vec<f64>,
    write: Vec<f64>,
    read: Vec<f64>,
    util: Vec<f64>,
}

impl RowValues {
    fn push(&mut self, overall: f64, random: f64, ub: f64, write: f64, read: f64, util: f64) {
        self.overall.push(overall);
        self.random.push(random);
        self.ub.push(ub);
        if let Ok(m) = memory_score(overall, random, ub) {
            self.memory.push(m);
        }
        self.write.push(write);
        self.read.push(read);
        self.util.push(util);
    }

    fn row(&self, position: Option<usize>) -> SummaryRow {
        let s = |xs: &[f64]| Stat::of(xs).unwrap_or(Stat { mean: 0.0, std: None });
        SummaryRow {
            position,
            overall: s(&self.overall),
            random: s(&self.random),
            ub: s(&self.ub),
            memory: Stat::of(&self.memory),
            write_rate: s(&self.write),
            read_rate: s(&self.read),
            util_rate: s(&self.util),
        }
    }
}

/// Merges reports: `runs[r]` holds one bundle per user for repeat `r`. Users
/// are averaged per position, then runs give mean and sample stdev.
pub fn summarize_runs(runs: &[Vec<ReportBundle>]) -> Result<RunSummary, MetricsError> {
    let first = runs.first().and_then(|r| r.first()).ok_or(MetricsError::Empty)?;
    let n_pos = first.per_position.len();
    let users = runs[0].len();
    let mut agents: Vec<String> = Vec::new();
    for run in runs {
        if run.is_empty() {
            return Err(MetricsError::Empty);
        }
        for b in run {
            if b.per_position.len() != n_pos {
                return Err(MetricsError::Compatibility(format!(
                    "{} has {} positions, expected {n_pos}",
                    b.metadata.blueprint_ref,
                    b.per_position.len()
                )));
            }
            if !agents.contains(&b.metadata.agent_descriptor) {
                agents.push(b.metadata.agent_descriptor.clone());
            }
        }
    }

    let mut per_position: Vec<RowValues> = (0..n_pos).map(|_| RowValues::default()).collect();
    let mut all = RowValues::default();
    for run in runs {
        let avg = |f: &dyn Fn(&ReportBundle) -> f64| mean(run.iter().map(f));
        for (t, values) in per_position.iter_mut().enumerate() {
            values.push(
                avg(&|b| b.per_position[t].overall),
                avg(&|b| b.per_position[t].random),
                avg(&|b| b.per_position[t].ub),
                avg(&|b| b.diagnostics[t].write_rate),
                avg(&|b| b.diagnostics[t].read_rate),
                avg(&|b| b.diagnostics[t].util_rate),
            );
        }
        all.push(
            avg(&|b| b.aggregate.overall),
            avg(&|b| b.aggregate.random),
            avg(&|b| b.aggregate.ub),
            avg(&|b| b.aggregate.write_rate),
            avg(&|b| b.aggregate.read_rate),
            avg(&|b| b.aggregate.util_rate),
        );
    }
    let mut rows: Vec<SummaryRow> = per_position
        .iter()
        .enumerate()
        .map(|(t, v)| v.row(Some(first.per_position[t].position)))
        .collect();
    rows.push(all.row(None));
    Ok(RunSummary {
        runs: runs.len(),
        users,
        agents,
        rows,
    })
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "position,overall_mean,overall_std,random_mean,random_std,ub_mean,ub_std,\
memory_mean,memory_std,write_rate_mean,write_rate_std,read_rate_mean,read_rate_std,util_rate_mean,util_rate_std";

    pub fn to_csv(&self) -> String {
        let cell = |s: Option<Stat>| match s {
            Some(s) => format!("{},{}", fmt_num(s.mean), s.std.map(fmt_num).unwrap_or_default()),
            None => ",".to_string(),
        };
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let pos = r.position.map(|p| p.to_string()).unwrap_or_else(|| "all".into());
            let _ = writeln!(
                out,
                "{pos},{},{},{},{},{},{},{}",
                cell(Some(r.overall)),
                cell(Some(r.random)),
                cell(Some(r.ub)),
                cell(r.memory),
                cell(Some(r.write_rate)),
                cell(Some(r.read_rate)),
                cell(Some(r.util_rate)),
            );
        }
        out
    }
}
