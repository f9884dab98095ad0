//! Settings resolution: flags over config file over defaults.

use std::path::Path;

use anyhow::Context;
use memgym_core::backend::live::LiveConfig;
use memgym_core::backend::RetryPolicy;
use memgym_core::evolve::FeedbackMode;
use memgym_core::model::GenConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::{AgentArgs, BackendKind, GlobalArgs};
use crate::error::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    seed: Option<u64>,
    backend: Option<BackendKind>,
    jobs: Option<usize>,
    num_users: Option<usize>,
    gen: Option<toml::Table>,
    agent: Option<AgentFile>,
    live: Option<toml::Table>,
    retry: Option<toml::Table>,
    evolve: Option<EvolveFile>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    freq: Option<usize>,
    ns: Option<usize>,
    topk: Option<usize>,
    max_context_tokens: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvolveFile {
    cycles: Option<usize>,
    feedback: Option<String>,
}

/// Agent parameters after precedence; `None` keeps the per-kind default.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AgentParams {
    pub freq: Option<usize>,
    pub ns: Option<usize>,
    pub topk: Option<usize>,
    pub max_context_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub preset: String,
    pub seed: u64,
    pub backend: BackendKind,
    pub jobs: usize,
    pub num_users: usize,
    pub gen: GenConfig,
    pub agent: AgentParams,
    pub live: LiveConfig,
    pub retry: RetryPolicy,
    pub cycles: usize,
    pub feedback: FeedbackMode,
}

const DEFAULT_SEED: u64 = 0;
const DEFAULT_USERS: usize = 1;
const DEFAULT_CYCLES: usize = 5;

/// Replaces fields of `base` with the entries of `table`; unknown keys are an error.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: &toml::Table, section: &str) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("settings sections are structs");
    for (k, v) in table {
        if !obj.contains_key(k) {
            return Err(UsageError(format!("unknown key {k:?} in [{section}]")).into());
        }
        obj.insert(k.clone(), serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid [{section}] section: {e}")).into())
}

fn read_file(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

fn preset(name: &str) -> anyhow::Result<GenConfig> {
    GenConfig::named(name).ok_or_else(|| UsageError(format!("unknown preset {name:?} (base, extra)")).into())
}

impl Settings {
    pub fn resolve(global: &GlobalArgs) -> anyhow::Result<Settings> {
        let (preset_name, file) = match global.config.as_deref() {
            None => ("base".to_string(), FileConfig::default()),
            Some(name) if GenConfig::named(name).is_some() => (name.to_string(), FileConfig::default()),
            Some(path) => {
                let file = read_file(Path::new(path))?;
                (file.preset.clone().unwrap_or_else(|| "base".into()), file)
            }
        };
        let mut gen = preset(&preset_name)?;
        if let Some(t) = &file.gen {
            gen = overlay(&gen, t, "gen")?;
        }
        gen.check().map_err(|e| UsageError(format!("[gen]: {e}")))?;
        let mut live = LiveConfig::default();
        if let Some(t) = &file.live {
            live = overlay(&live, t, "live")?;
        }
        let mut retry = RetryPolicy::default();
        if let Some(t) = &file.retry {
            retry = overlay(&retry, t, "retry")?;
        }
        let agent_file = file.agent.clone().unwrap_or_default();
        let evolve_file = file.evolve.clone().unwrap_or_default();
        let feedback = evolve_file.feedback.as_deref().unwrap_or("complete");
        Ok(Settings {
            preset: preset_name,
            seed: global.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            backend: global.backend.or(file.backend).unwrap_or(BackendKind::Scripted),
            jobs: global.jobs.or(file.jobs).unwrap_or(1).max(1),
            num_users: file.num_users.unwrap_or(DEFAULT_USERS),
            gen,
            agent: AgentParams {
                freq: agent_file.freq,
                ns: agent_file.ns,
                topk: agent_file.topk,
                max_context_tokens: agent_file.max_context_tokens,
            },
            live: live.from_env(),
            retry,
            cycles: evolve_file.cycles.unwrap_or(DEFAULT_CYCLES),
            feedback: feedback.parse().map_err(UsageError)?,
        })
    }

    pub fn apply_agent_flags(&mut self, args: &AgentArgs) {
        let a = &mut self.agent;
        a.freq = args.freq.or(a.freq);
        a.ns = args.ns.or(a.ns);
        a.topk = args.topk.or(a.topk);
        a.max_context_tokens = args.max_context_tokens.or(a.max_context_tokens);
    }

    /// Snapshot for the run manifest.
    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("settings serialize")
    }
}
