use std::fmt::Write as _;
use std::path::Path;

use memgym_core::backend::PromptRegistry;
use memgym_core::evolve::{run_evolution, CycleRecord, EvolutionBackends, EvolutionConfig, EvolveError, PolicyPrompt};
use memgym_core::memory::{AgentConfig, AgentKind};
use memgym_core::model::{Blueprint, ReportBundle};
use serde::Serialize;

use super::load_blueprints;
use crate::backends::Backends;
use crate::cli::{EvolveArgs, GlobalArgs};
use crate::config::Settings;
use crate::error::UsageError;
use crate::output::{ensure_dir, write_atomic, write_versioned, RunManifest};

#[derive(Serialize)]
struct CycleReports<'a> {
    cycle: usize,
    prompt_version: usize,
    reports: &'a [ReportBundle],
}

#[derive(Serialize)]
struct CycleRecall<'a> {
    cycle: usize,
    prompt_version: usize,
    mean: Option<f64>,
    results: &'a [memgym_core::evolve::RecallResult],
}

const CURVE_HEADER: &str = "cycle,prompt_version,overall,memory,write_rate,read_rate,util_rate,recall";

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn curve_row(r: &CycleRecord) -> String {
    let agg = |f: fn(&ReportBundle) -> f64| mean(r.reports.iter().map(f));
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        r.cycle,
        r.prompt.version,
        cell(agg(|b| b.aggregate.overall)),
        cell(r.mean_memory_score()),
        cell(agg(|b| b.aggregate.write_rate)),
        cell(agg(|b| b.aggregate.read_rate)),
        cell(agg(|b| b.aggregate.util_rate)),
        cell(r.mean_recall()),
    )
}

fn write_prompt(out: &Path, p: &PolicyPrompt) -> anyhow::Result<std::path::PathBuf> {
    let path = out.join(format!("prompt_v{}.txt", p.version));
    write_atomic(&path, &p.full_text)?;
    Ok(path)
}

fn write_cycle(out: &Path, r: &CycleRecord) -> anyhow::Result<Vec<std::path::PathBuf>> {
    let k = r.cycle;
    let mut paths = Vec::new();
    if k == 0 {
        paths.push(write_prompt(out, &r.prompt)?);
    }
    let feedback = out.join(format!("feedback_v{k}.json"));
    let mut text = serde_json::to_string_pretty(&r.feedback)?;
    text.push('\n');
    write_atomic(&feedback, &text)?;
    let report = out.join(format!("report_v{k}.json"));
    write_versioned(
        &report,
        &CycleReports {
            cycle: k,
            prompt_version: r.prompt.version,
            reports: &r.reports,
        },
    )?;
    let recall = out.join(format!("recall_v{k}.json"));
    write_versioned(
        &recall,
        &CycleRecall {
            cycle: k,
            prompt_version: r.prompt.version,
            mean: r.mean_recall(),
            results: &r.recall,
        },
    )?;
    paths.extend([feedback, report, recall]);
    paths.push(write_prompt(out, &r.next)?);
    Ok(paths)
}

pub fn evolve(global: &GlobalArgs, mut settings: Settings, args: &EvolveArgs) -> anyhow::Result<()> {
    settings.apply_agent_flags(&args.params);
    if let Some(c) = args.cycles {
        settings.cycles = c;
    }
    if let Some(f) = &args.feedback {
        settings.feedback = f.parse().map_err(UsageError)?;
    }
    if settings.cycles == 0 {
        return Err(UsageError("--cycles must be at least 1".into()).into());
    }
    let backends = Backends::build(&settings, global.log_io.as_deref())?;
    let mut agent = AgentConfig::new(AgentKind::Awi);
    agent.freq = settings.agent.freq.unwrap_or(agent.freq);
    agent.ns = settings.agent.ns.unwrap_or(agent.ns);
    agent.topk = settings.agent.topk.unwrap_or(agent.topk);
    agent.model = backends.chat.descriptor();
    agent.check().map_err(|e| UsageError(e.to_string()))?;

    let mut manifest = RunManifest::start("evolve", settings.snapshot());
    manifest.input(&args.blueprints);
    manifest.seeds.insert("episode".into(), settings.seed);
    manifest.backends.insert("chat".into(), backends.chat.descriptor());
    let blueprints: Vec<Blueprint> = load_blueprints(&args.blueprints)?.into_values().collect();
    ensure_dir(&args.out)?;

    let cfg = EvolutionConfig {
        agent,
        cycles: settings.cycles,
        mode: settings.feedback,
        seed: settings.seed,
        retry: settings.retry.clone(),
    };
    let evo_backends = EvolutionBackends {
        agent: backends.chat.clone(),
        embed: None,
        user: backends.chat.clone(),
        judge: backends.chat.clone(),
    };
    let mut curve = format!("{CURVE_HEADER}\n");
    let mut write_err: Option<anyhow::Error> = None;
    let mut on_cycle = |r: &CycleRecord| {
        if write_err.is_some() {
            return;
        }
        match write_cycle(&args.out, r) {
            Ok(paths) => paths.iter().for_each(|p| manifest.output(p)),
            Err(e) => write_err = Some(e),
        }
        let _ = writeln!(curve, "{}", curve_row(r));
        println!(
            "cycle {}: memory {} recall {} ({} change(s))",
            r.cycle,
            r.mean_memory_score()
                .map(|m| format!("{m:.3}"))
                .unwrap_or_else(|| "n/a".into()),
            r.mean_recall()
                .map(|m| format!("{m:.3}"))
                .unwrap_or_else(|| "n/a".into()),
            r.next.changes.len()
        );
    };
    let result = run_evolution(
        &blueprints,
        &cfg,
        &evo_backends,
        &PromptRegistry::standard(),
        &mut on_cycle,
    );
    let curve_path = args.out.join("evolution.csv");
    write_atomic(&curve_path, &curve)?;
    manifest.output(&curve_path);
    manifest.finish(&args.out)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    match result {
        Ok(_) => Ok(()),
        Err(EvolveError::Cycle {
            cycle,
            source,
            completed,
        }) => {
            tracing::error!(
                cycle,
                completed = completed.len(),
                "evolution stopped; finished cycles are on disk"
            );
            Err(EvolveError::Cycle {
                cycle,
                source,
                completed: Vec::new(),
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}
