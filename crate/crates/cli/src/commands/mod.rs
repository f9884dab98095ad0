mod evolve;
mod gen;
mod report;
mod run;
mod score;

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use memgym_core::model::Blueprint;
use rayon::prelude::*;

use crate::output::{files_with_suffix, read_doc};

pub use evolve::evolve;
pub use gen::gen;
pub use report::report;
pub use run::run;
pub use score::{score, ScoreKind};

pub const BLUEPRINT_SUFFIX: &str = ".blueprint.json";
pub const TRACE_SUFFIX: &str = ".trace.json";
pub const REPORT_SUFFIX: &str = ".report.json";

/// The agent configuration part of a descriptor; the backend after `@`
/// differs between repeats that vary the scripted seed.
pub fn agent_key(descriptor: &str) -> &str {
    descriptor.split_once('@').map_or(descriptor, |(agent, _)| agent)
}

/// Blueprints of a directory keyed by id.
pub fn load_blueprints(dir: &Path) -> anyhow::Result<BTreeMap<String, Blueprint>> {
    let mut out = BTreeMap::new();
    for path in files_with_suffix(dir, BLUEPRINT_SUFFIX)? {
        let bp: Blueprint = read_doc(&path)?;
        out.insert(bp.id.clone(), bp);
    }
    if out.is_empty() {
        return Err(crate::error::UsageError(format!("no *{BLUEPRINT_SUFFIX} files in {}", dir.display())).into());
    }
    Ok(out)
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
pub fn parallel<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> anyhow::Result<R> + Sync + Send,
) -> anyhow::Result<Vec<anyhow::Result<R>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("starting worker pool")?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

/// The first error of `results`, after logging every other one.
pub fn first_error<R>(results: Vec<anyhow::Result<R>>) -> (Vec<R>, Option<anyhow::Error>) {
    let mut ok = Vec::new();
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) if first.is_none() => first = Some(e),
            Err(e) => tracing::error!(error = %format!("{e:#}"), "job failed"),
        }
    }
    (ok, first)
}
