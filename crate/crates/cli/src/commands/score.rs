use std::fmt::Write as _;

use anyhow::Context;
use memgym_core::metrics::{aggregate_report, report_csv};
use memgym_core::model::{EpisodeTrace, ReportBundle};

use super::{agent_key, first_error, load_blueprints, parallel, REPORT_SUFFIX, TRACE_SUFFIX};
use crate::cli::EvalArgs;
use crate::config::Settings;
use crate::error::{UsageError, ValidationError};
use crate::output::{ensure_dir, files_with_suffix, read_doc, slug, write_atomic, write_versioned, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Eval,
    Diagnose,
}

fn labels_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("position,question_id,label\n");
    for l in &bundle.labels {
        let label = serde_json::to_value(l.label).ok();
        let _ = writeln!(
            out,
            "{},{},{}",
            l.position,
            l.question_id,
            label.as_ref().and_then(|v| v.as_str()).unwrap_or("")
        );
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

pub fn score(kind: ScoreKind, settings: Settings, args: &EvalArgs) -> anyhow::Result<()> {
    let command = match kind {
        ScoreKind::Eval => "eval",
        ScoreKind::Diagnose => "diagnose",
    };
    let mut manifest = RunManifest::start(command, settings.snapshot());
    manifest.input(&args.blueprints);
    manifest.input(&args.traces);
    let blueprints = load_blueprints(&args.blueprints)?;
    let traces = files_with_suffix(&args.traces, TRACE_SUFFIX)?;
    if traces.is_empty() {
        return Err(UsageError(format!("no *{TRACE_SUFFIX} files in {}", args.traces.display())).into());
    }
    ensure_dir(&args.out)?;

    let results = parallel(settings.jobs, &traces, |path| {
        let trace: EpisodeTrace = read_doc(path)?;
        let bp = blueprints.get(&trace.blueprint_ref).ok_or_else(|| {
            ValidationError(format!(
                "{} refers to blueprint {:?}, not found in {}",
                path.display(),
                trace.blueprint_ref,
                args.blueprints.display()
            ))
        })?;
        let bundle = aggregate_report(&trace, bp).with_context(|| format!("scoring {}", path.display()))?;
        // agent first, so several agents can share one output directory
        let stem = format!("{}.{}", slug(agent_key(&trace.agent_descriptor)), bp.id);
        let json_path = args.out.join(format!("{stem}{REPORT_SUFFIX}"));
        let csv_path = args.out.join(format!("{stem}.report.csv"));
        write_versioned(&json_path, &bundle)?;
        write_atomic(&csv_path, &report_csv(&bundle))?;
        let mut written = vec![json_path, csv_path];
        if kind == ScoreKind::Diagnose {
            let labels = args.out.join(format!("{stem}.labels.csv"));
            write_atomic(&labels, &labels_csv(&bundle))?;
            written.push(labels);
        }
        Ok((bundle, written))
    })?;
    let (done, err) = first_error(results);
    for (bundle, paths) in &done {
        paths.iter().for_each(|p| manifest.output(p));
        let a = &bundle.aggregate;
        let m = &bundle.metadata;
        match kind {
            ScoreKind::Eval => println!(
                "{} {}: overall {:.3} random {:.3} ub {:.3} memory {}",
                m.blueprint_ref,
                m.agent_descriptor,
                a.overall,
                a.random,
                a.ub,
                fmt_opt(a.memory)
            ),
            ScoreKind::Diagnose => println!(
                "{} {}: write {:.3} read {:.3} utilization {:.3} (memory {})",
                m.blueprint_ref,
                m.agent_descriptor,
                a.write_rate,
                a.read_rate,
                a.util_rate,
                fmt_opt(a.memory)
            ),
        }
    }
    manifest.finish(&args.out)?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
