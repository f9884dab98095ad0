use std::collections::BTreeMap;

use memgym_core::metrics::{summarize_runs, RunSummary};
use memgym_core::model::ReportBundle;

use super::{agent_key, REPORT_SUFFIX};
use crate::cli::ReportArgs;
use crate::config::Settings;
use crate::error::{UsageError, ValidationError};
use crate::output::{ensure_dir, files_with_suffix, read_doc, slug, write_atomic, write_versioned, RunManifest};

/// Reports grouped by agent, then by run directory.
type Grouped = BTreeMap<String, Vec<Vec<ReportBundle>>>;

fn group(args: &ReportArgs, manifest: &mut RunManifest) -> anyhow::Result<Grouped> {
    let mut grouped: Grouped = BTreeMap::new();
    for (run, dir) in args.repeat_dirs.iter().enumerate() {
        manifest.input(dir);
        for path in files_with_suffix(dir, REPORT_SUFFIX)? {
            let bundle: ReportBundle = read_doc(&path)?;
            let runs = grouped
                .entry(agent_key(&bundle.metadata.agent_descriptor).to_string())
                .or_default();
            runs.resize_with(args.repeat_dirs.len(), Vec::new);
            runs[run].push(bundle);
        }
    }
    for (agent, runs) in grouped.iter_mut() {
        for run in runs.iter_mut() {
            run.sort_by(|a, b| a.metadata.blueprint_ref.cmp(&b.metadata.blueprint_ref));
        }
        let users =
            |run: &Vec<ReportBundle>| -> Vec<String> { run.iter().map(|b| b.metadata.blueprint_ref.clone()).collect() };
        let expected = users(&runs[0]);
        for (i, run) in runs.iter().enumerate() {
            if users(run) != expected {
                return Err(ValidationError(format!(
                    "{agent}: {} covers users {:?}, {} covers {:?}",
                    args.repeat_dirs[0].display(),
                    expected,
                    args.repeat_dirs[i].display(),
                    users(run)
                ))
                .into());
            }
        }
    }
    Ok(grouped)
}

pub fn report(settings: Settings, args: &ReportArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start("report", settings.snapshot());
    let grouped = group(args, &mut manifest)?;
    if grouped.is_empty() {
        return Err(UsageError("no report bundles found in the given directories".into()).into());
    }
    ensure_dir(&args.out)?;
    let mut summaries: BTreeMap<String, RunSummary> = BTreeMap::new();
    for (agent, runs) in &grouped {
        let summary = summarize_runs(runs)?;
        let path = args.out.join(format!("{}.summary.csv", slug(agent)));
        write_atomic(&path, &summary.to_csv())?;
        manifest.output(&path);
        if let Some(all) = summary.rows.last() {
            let memory = all
                .memory
                .map(|m| match m.std {
                    Some(s) => format!("{:.3} ± {:.3}", m.mean, s),
                    None => format!("{:.3}", m.mean),
                })
                .unwrap_or_else(|| "n/a".into());
            println!(
                "{agent}: {} run(s), {} user(s), memory score {memory}",
                summary.runs, summary.users
            );
        }
        summaries.insert(agent.clone(), summary);
    }
    let json_path = args.out.join("summary.json");
    write_versioned(&json_path, &summaries)?;
    manifest.output(&json_path);
    manifest.finish(&args.out)
}
