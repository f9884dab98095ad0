use std::sync::Arc;

use anyhow::Context;
use memgym_core::arena::{run_episode, AssistantHandle, Interaction, OracleAssistant, RandomAssistant, UserSimulator};
use memgym_core::backend::PromptRegistry;
use memgym_core::memory::{AgentConfig, AgentKind, MemoryAgent};
use memgym_core::model::{Blueprint, EpisodeTrace};
use memgym_core::rng::derive_seed;

use super::{first_error, load_blueprints, parallel, TRACE_SUFFIX};
use crate::backends::Backends;
use crate::cli::{GlobalArgs, ModeArg, RunArgs};
use crate::config::{AgentParams, Settings};
use crate::error::UsageError;
use crate::output::{ensure_dir, read_doc, slug, write_atomic, write_versioned, RunManifest};

#[derive(Debug, Clone)]
enum AgentSpec {
    Oracle,
    Random,
    Memory(AgentConfig),
}

impl AgentSpec {
    fn parse(name: &str, params: &AgentParams, model: &str) -> anyhow::Result<Self> {
        match name.trim() {
            "oracle" => Ok(AgentSpec::Oracle),
            "random" => Ok(AgentSpec::Random),
            other => {
                let kind: AgentKind = other
                    .parse()
                    .map_err(|e: memgym_core::memory::MemoryError| UsageError(e.to_string()))?;
                let mut cfg = AgentConfig::new(kind);
                cfg.freq = params.freq.unwrap_or(cfg.freq);
                cfg.ns = params.ns.unwrap_or(cfg.ns);
                cfg.topk = params.topk.unwrap_or(cfg.topk);
                cfg.max_context_tokens = params.max_context_tokens;
                cfg.model = model.to_string();
                cfg.check().map_err(|e| UsageError(e.to_string()))?;
                Ok(AgentSpec::Memory(cfg))
            }
        }
    }

    fn descriptor(&self) -> String {
        match self {
            AgentSpec::Oracle => "oracle".into(),
            AgentSpec::Random => "random".into(),
            AgentSpec::Memory(cfg) => cfg.descriptor(),
        }
    }

    fn build(
        &self,
        backends: &Backends,
        prompts: &Arc<PromptRegistry>,
        settings: &Settings,
        seed: u64,
    ) -> anyhow::Result<Box<dyn AssistantHandle>> {
        Ok(match self {
            AgentSpec::Oracle => Box::new(OracleAssistant::new()),
            AgentSpec::Random => Box::new(RandomAssistant::new(seed)),
            AgentSpec::Memory(cfg) => Box::new(
                MemoryAgent::new(
                    cfg.clone(),
                    backends.chat.clone(),
                    Some(backends.embed.clone()),
                    prompts.clone(),
                )?
                .with_retry(settings.retry.clone()),
            ),
        })
    }
}

pub fn run(global: &GlobalArgs, mut settings: Settings, args: &RunArgs) -> anyhow::Result<()> {
    settings.apply_agent_flags(&args.params);
    if args.agent.is_empty() {
        return Err(UsageError("--agent is required (llm, rag, awe, awi, oracle, random)".into()).into());
    }
    let backends = Backends::build(&settings, global.log_io.as_deref())?;
    let specs = args
        .agent
        .iter()
        .map(|a| AgentSpec::parse(a, &settings.agent, &backends.chat.descriptor()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let replay_dir = match (args.mode, &args.replay) {
        (ModeArg::Offpolicy, Some(dir)) => Some(dir.clone()),
        (ModeArg::Offpolicy, None) => return Err(UsageError("--mode offpolicy needs --replay DIR".into()).into()),
        (ModeArg::Onpolicy, Some(_)) => {
            return Err(UsageError("--replay is only valid with --mode offpolicy".into()).into())
        }
        (ModeArg::Onpolicy, None) => None,
    };

    let mut manifest = RunManifest::start("run", settings.snapshot());
    manifest.input(&args.blueprints);
    if let Some(d) = &replay_dir {
        manifest.input(d);
    }
    manifest.backends.insert("chat".into(), backends.chat.descriptor());
    manifest.backends.insert("embed".into(), backends.embed.descriptor());
    let blueprints: Vec<Blueprint> = load_blueprints(&args.blueprints)?.into_values().collect();
    let prompts = Arc::new(PromptRegistry::standard());
    ensure_dir(&args.out)?;

    let jobs: Vec<(&Blueprint, &AgentSpec)> = blueprints
        .iter()
        .flat_map(|bp| specs.iter().map(move |s| (bp, s)))
        .collect();
    let results = parallel(settings.jobs, &jobs, |(bp, spec)| {
        let seed = derive_seed(settings.seed, &bp.id);
        let mut assistant = spec.build(&backends, &prompts, &settings, seed)?;
        let user = UserSimulator::new(backends.chat.clone(), prompts.clone()).with_retry(settings.retry.clone());
        let trace = match &replay_dir {
            None => run_episode(bp, &mut assistant, Interaction::OnPolicy(&user), seed),
            Some(dir) => {
                let replay: EpisodeTrace = read_doc(&dir.join(format!("{}{TRACE_SUFFIX}", bp.id)))
                    .with_context(|| format!("loading replay for {}", bp.id))?;
                let source = replay.agent_descriptor.clone();
                run_episode(
                    bp,
                    &mut assistant,
                    Interaction::OffPolicy {
                        replay: &replay,
                        source,
                    },
                    seed,
                )
            }
        }
        .with_context(|| format!("{} episode for {}", spec.descriptor(), bp.id))?;
        let dir = args.out.join(slug(&spec.descriptor()));
        let path = dir.join(format!("{}{TRACE_SUFFIX}", bp.id));
        write_versioned(&path, &trace)?;
        let mut written = vec![path];
        if args.dump_memory {
            let dump = dir.join(format!("{}.memory.json", bp.id));
            let mut text = serde_json::to_string_pretty(&assistant.memory_dump())?;
            text.push('\n');
            write_atomic(&dump, &text)?;
            written.push(dump);
        }
        Ok((format!("{}/{}", spec.descriptor(), bp.id), seed, written))
    })?;
    let (done, err) = first_error(results);
    for (key, seed, paths) in &done {
        manifest.seeds.insert(key.clone(), *seed);
        paths.iter().for_each(|p| manifest.output(p));
    }
    manifest.finish(&args.out)?;
    println!("wrote {} trace(s) under {}", done.len(), args.out.display());
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
