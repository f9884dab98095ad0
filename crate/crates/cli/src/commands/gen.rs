use anyhow::Context;
use memgym_core::backend::PromptRegistry;
use memgym_core::genesis::{generate_blueprint, read_pool, synthetic_pool, Genesis};
use memgym_core::rng::derive_seed;

use super::{first_error, parallel, BLUEPRINT_SUFFIX};
use crate::backends::Backends;
use crate::cli::{GenArgs, GlobalArgs};
use crate::config::Settings;
use crate::error::UsageError;
use crate::output::{ensure_dir, write_versioned, RunManifest};

pub fn gen(global: &GlobalArgs, mut settings: Settings, args: &GenArgs) -> anyhow::Result<()> {
    if let Some(n) = args.num_users {
        settings.num_users = n;
    }
    let n = settings.num_users;
    if n == 0 {
        return Err(UsageError("--num-users must be at least 1".into()).into());
    }
    let mut manifest = RunManifest::start("gen", settings.snapshot());
    manifest.seeds.insert("base".into(), settings.seed);
    let pool = match &args.pool {
        Some(path) => {
            manifest.input(path);
            read_pool(path).with_context(|| format!("reading persona pool {}", path.display()))?
        }
        None => synthetic_pool(n, settings.seed),
    };
    if pool.len() < n {
        return Err(UsageError(format!("persona pool has {} records, {n} users requested", pool.len())).into());
    }
    let backends = Backends::build(&settings, global.log_io.as_deref())?;
    manifest.backends.insert("chat".into(), backends.chat.descriptor());
    ensure_dir(&args.out)?;

    let prompts = PromptRegistry::standard();
    let ids: Vec<(usize, String)> = (0..n).map(|i| (i, format!("user_{i:03}"))).collect();
    let results = parallel(settings.jobs, &ids, |(i, id)| {
        let genesis =
            Genesis::new(backends.chat.as_ref(), &prompts, settings.gen.clone()).with_retry(settings.retry.clone());
        let seed = derive_seed(settings.seed, id);
        let bp = generate_blueprint(&genesis, &pool[*i], id, seed).with_context(|| format!("generating {id}"))?;
        let path = args.out.join(format!("{id}{BLUEPRINT_SUFFIX}"));
        write_versioned(&path, &bp)?;
        Ok((id.clone(), seed, path))
    })?;
    let (written, err) = first_error(results);
    for (id, seed, path) in &written {
        manifest.seeds.insert(id.clone(), *seed);
        manifest.output(path);
    }
    manifest.finish(&args.out)?;
    println!("wrote {} blueprint(s) to {}", written.len(), args.out.display());
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
