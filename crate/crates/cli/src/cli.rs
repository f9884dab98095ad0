use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "memgym",
    version,
    about = "Simulated-user gym for conversational memory agents"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Preset name (base, extra) or path to a TOML config file.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Model backend.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Base seed; per-user and per-episode seeds derive from it (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel episodes or blueprints.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Append every prompt/response pair to this JSON-lines file.
    #[arg(long, global = true)]
    pub log_io: Option<PathBuf>,
    /// Repeat for more log output (info, debug, trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline world, no network.
    Scripted,
    /// OpenAI-compatible endpoint from AMEMGYM_BASE_URL / AMEMGYM_API_KEY.
    Live,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate user blueprints.
    Gen(GenArgs),
    /// Run episodes for one or more agents.
    Run(RunArgs),
    /// Score traces into per-position reports.
    Eval(EvalArgs),
    /// Score traces and attribute failures to write, read or utilization.
    Diagnose(EvalArgs),
    /// Evolve the in-context memory update prompt from environment feedback.
    Evolve(EvolveArgs),
    /// Merge reports across users and repeated runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of users to generate (default 1).
    #[arg(long)]
    pub num_users: Option<usize>,
    /// Persona pool as JSON lines; a synthetic pool is used when absent.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value = "blueprints")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    /// Rounds between memory updates.
    #[arg(long)]
    pub freq: Option<usize>,
    /// Rounds kept in context.
    #[arg(long)]
    pub ns: Option<usize>,
    /// Memories retrieved per query.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Context budget of the llm agent, in estimated tokens.
    #[arg(long)]
    pub max_context_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Onpolicy,
    Offpolicy,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory of `*.blueprint.json` files.
    #[arg(long)]
    pub blueprints: PathBuf,
    /// Agent kinds: llm, rag, awe, awi, oracle, random (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub agent: Vec<String>,
    #[command(flatten)]
    pub params: AgentArgs,
    #[arg(long, value_enum, default_value = "onpolicy")]
    pub mode: ModeArg,
    /// Directory of traces whose conversations are replayed (offpolicy).
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Also write each agent's final memory store.
    #[arg(long)]
    pub dump_memory: bool,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `*.blueprint.json` files.
    #[arg(long)]
    pub blueprints: PathBuf,
    /// Directory of `*.trace.json` files.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    /// Directory of `*.blueprint.json` files.
    #[arg(long)]
    pub blueprints: PathBuf,
    /// Evolution cycles, one prompt per cycle (default 5).
    #[arg(long)]
    pub cycles: Option<usize>,
    /// none, question_only or complete.
    #[arg(long)]
    pub feedback: Option<String>,
    #[command(flatten)]
    pub params: AgentArgs,
    #[arg(long, default_value = "evolution")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One directory of `*.report.json` files per repeated run.
    #[arg(long = "repeat-dirs", num_args = 1.., required = true)]
    pub repeat_dirs: Vec<PathBuf>,
    #[arg(long, default_value = "summary")]
    pub out: PathBuf,
}
