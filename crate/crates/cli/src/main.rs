//! Command-line driver: resolve issues singly or in batches, inspect
//! persisted memory and outcomes, and record post-hoc regression judgements.
//!
//! Exit codes: 0 resolved / command succeeded, 1 unresolved, 2 reproduction
//! failed, 64 bad usage or configuration, 70 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use mender_core::config::{builtin_profiles, EngineConfig, IssueFile, LanguageProfile};
use mender_core::domain::{AgentRole, FinalStatus, Issue};
use mender_core::llm::{Backend, HttpBackend, HttpConfig, ReplayBackend};
use mender_core::memory::Memory;
use mender_core::metrics::{compute_stats, render_stats, IssueOutcome};
use mender_core::pipeline::Engine;
use mender_core::prompting::{set_prompt_dir, Phase};
use mender_core::state::StateDir;

const EXIT_UNRESOLVED: u8 = 1;
const EXIT_REPRODUCTION_FAILED: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_RUNTIME: u8 = 70;

#[derive(Parser)]
#[command(
    name = "mender",
    version,
    about = "Automated issue repair driven by test, patch and review agents"
)]
struct Cli {
    /// Directory holding trajectories, outcomes, memory and prompt logs.
    #[arg(long, global = true, default_value = "mender-state")]
    state_dir: PathBuf,
    /// TOML file with optional [engine] and [http] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory of per-stage prompt template overrides (<stage>.txt).
    #[arg(long, global = true)]
    prompt_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resolve one issue; the exit code reflects the outcome.
    Run(RunArgs),
    /// Resolve several issues in order, sharing accumulated memory.
    Batch(BatchArgs),
    /// Summarize every recorded outcome in the state directory.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Inspect the persisted dual memory.
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
    /// Record whether a resolved issue's fix avoided regressions.
    SetRsr {
        #[arg(long)]
        issue_id: String,
        /// true when the fix introduced no regression.
        #[arg(long, action = clap::ArgAction::Set)]
        safe: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Issue description file: {id, title, body, repo_root, ...} as JSON.
    #[arg(long)]
    issue: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Override the configured workflow phase.
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    /// Print the full outcome record as JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BatchArgs {
    /// Issue description files; may be given multiple times.
    #[arg(long = "issue", required = true)]
    issues: Vec<PathBuf>,
    /// Worker threads for the memory-building phase (inference is always
    /// sequential, and a replay backend forces one worker).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Http)]
    backend: BackendKind,
    /// Recorded transcript file, required with --backend replay.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Chat-completion HTTP endpoint configured under [http].
    Http,
    /// Scripted answers from a recorded JSON transcript.
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    /// Build memory; prompts carry no demonstrations or insights.
    Initial,
    /// Consume memory; prompts carry retrieved demonstrations and insights.
    Inference,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Initial => Phase::Initial,
            PhaseArg::Inference => Phase::Inference,
        }
    }
}

#[derive(Subcommand)]
enum MemoryCommand {
    /// Per-role demonstration counts and stored insights.
    Ls,
    /// Dump both memory pools as JSON.
    Export,
}

/// TOML configuration: engine budgets plus HTTP endpoint settings. The API
/// key itself never appears here, only the name of the environment variable
/// that holds it.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    engine: EngineConfig,
    http: HttpSettings,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HttpSettings {
    endpoint_url: String,
    model: String,
    api_key_env: Option<String>,
    max_retries: u32,
    backoff_ms: u64,
    timeout_secs: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        let d = HttpConfig::default();
        Self {
            endpoint_url: d.endpoint_url,
            model: d.model,
            api_key_env: d.api_key_env,
            max_retries: d.max_retries,
            backoff_ms: d.backoff_ms,
            timeout_secs: d.timeout_secs,
        }
    }
}

impl From<HttpSettings> for HttpConfig {
    fn from(s: HttpSettings) -> Self {
        Self {
            endpoint_url: s.endpoint_url,
            model: s.model,
            api_key_env: s.api_key_env,
            max_retries: s.max_retries,
            backoff_ms: s.backoff_ms,
            timeout_secs: s.timeout_secs,
        }
    }
}

/// A failure paired with the exit code it should produce.
struct Failure {
    exit: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait Classify<T> {
    /// Bad input from the user: files, flags, configuration.
    fn usage(self) -> CliResult<T>;
    /// The environment or the run itself failed.
    fn runtime(self) -> CliResult<T>;
}

impl<T> Classify<T> for anyhow::Result<T> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|error| Failure {
            exit: EXIT_USAGE,
            error,
        })
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|error| Failure {
            exit: EXIT_RUNTIME,
            error,
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Argument mistakes share the usage exit code instead of clap's default 2,
    // which this tool reserves for failed reproductions.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.exit)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<ExitCode> {
    if let Some(dir) = &cli.prompt_dir {
        if !dir.is_dir() {
            return Err(anyhow!("prompt dir {} is not a directory", dir.display())).usage();
        }
        set_prompt_dir(dir.clone())
            .map_err(|_| anyhow!("prompt dir was already configured"))
            .usage()?;
    }
    let file_config = load_file_config(cli.config.as_deref())?;

    match cli.command {
        Command::Run(args) => run_single(&cli.state_dir, &file_config, args),
        Command::Batch(args) => run_batch(&cli.state_dir, &file_config, args),
        Command::Stats { json } => show_stats(&cli.state_dir, &file_config, json),
        Command::Memory { command } => inspect_memory(&cli.state_dir, &file_config, command),
        Command::SetRsr { issue_id, safe } => set_rsr(&cli.state_dir, &issue_id, safe),
    }
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .usage()?;
    toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .usage()
}

fn build_backend(args: &BackendArgs, file_config: &FileConfig) -> CliResult<Box<dyn Backend>> {
    match args.backend {
        BackendKind::Replay => {
            let path = args
                .replay
                .as_deref()
                .ok_or_else(|| anyhow!("--backend replay requires --replay <file>"))
                .usage()?;
            let backend = ReplayBackend::from_file(path)
                .map_err(|e| anyhow!("loading replay transcript {}: {e}", path.display()))
                .usage()?;
            Ok(Box::new(backend))
        }
        BackendKind::Http => {
            if args.replay.is_some() {
                return Err(anyhow!("--replay only applies to --backend replay")).usage();
            }
            let backend = HttpBackend::new(file_config.http.clone().into())
                .map_err(|e| anyhow!("building http backend: {e}"))
                .runtime()?;
            Ok(Box::new(backend))
        }
    }
}

fn load_issue(path: &Path) -> CliResult<(Issue, LanguageProfile)> {
    let file = IssueFile::load(path)
        .map_err(anyhow::Error::from)
        .usage()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    file.resolve(base, &builtin_profiles())
        .map_err(anyhow::Error::from)
        .usage()
}

fn open_engine(
    state_dir: &Path,
    file_config: &FileConfig,
    backend_args: &BackendArgs,
    phase: Option<PhaseArg>,
) -> CliResult<(Engine, Memory)> {
    let mut config = file_config.engine.clone();
    if let Some(p) = phase {
        config.phase = p.into();
    }
    let backend = build_backend(backend_args, file_config)?;
    let state = StateDir::open(state_dir)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let memory = state
        .load_memory(config.insight_cap)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let engine = Engine::new(config, backend, state)
        .map_err(anyhow::Error::from)
        .usage()?;
    Ok((engine, memory))
}

fn status_exit(status: FinalStatus) -> ExitCode {
    match status {
        FinalStatus::Resolved => ExitCode::SUCCESS,
        FinalStatus::Unresolved => ExitCode::from(EXIT_UNRESOLVED),
        FinalStatus::ReproductionFailed => ExitCode::from(EXIT_REPRODUCTION_FAILED),
    }
}

fn print_outcome(outcome: &IssueOutcome, json: bool) -> CliResult<()> {
    if json {
        let text = serde_json::to_string_pretty(outcome)
            .context("serializing outcome")
            .runtime()?;
        println!("{text}");
        return Ok(());
    }
    println!("issue {}: {}", outcome.issue_id, outcome.status);
    println!(
        "  llm calls: {}, tokens: {} in / {} out, wall time: {} ms",
        outcome.metrics.llm_calls,
        outcome.metrics.tokens_in,
        outcome.metrics.tokens_out,
        outcome.metrics.wall_time_ms
    );
    if let Some(patch) = &outcome.final_patch {
        println!("  final patch:\n{patch}");
    }
    Ok(())
}

fn run_single(state_dir: &Path, file_config: &FileConfig, args: RunArgs) -> CliResult<ExitCode> {
    let (issue, profile) = load_issue(&args.issue)?;
    let (engine, mut memory) = open_engine(state_dir, file_config, &args.backend, args.phase)?;
    let outcome = engine
        .run_issue(&issue, &profile, &mut memory)
        .map_err(anyhow::Error::from)
        .runtime()?;
    print_outcome(&outcome, args.json)?;
    Ok(status_exit(outcome.status))
}

fn run_batch(state_dir: &Path, file_config: &FileConfig, args: BatchArgs) -> CliResult<ExitCode> {
    let mut items = Vec::new();
    for path in &args.issues {
        items.push(load_issue(path)?);
    }
    let (engine, mut memory) = open_engine(state_dir, file_config, &args.backend, args.phase)?;
    let outcomes = engine
        .run_batch(&items, &mut memory, args.workers)
        .map_err(anyhow::Error::from)
        .runtime()?;

    if args.json {
        let text = serde_json::to_string_pretty(&outcomes)
            .context("serializing outcomes")
            .runtime()?;
        println!("{text}");
    } else {
        for outcome in &outcomes {
            println!("issue {}: {}", outcome.issue_id, outcome.status);
        }
        let stats = compute_stats(&outcomes, None);
        print!("{}", render_stats(&stats));
    }
    Ok(ExitCode::SUCCESS)
}

fn show_stats(state_dir: &Path, file_config: &FileConfig, json: bool) -> CliResult<ExitCode> {
    let state = StateDir::open(state_dir)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let outcomes = state
        .load_all_outcomes()
        .map_err(anyhow::Error::from)
        .runtime()?;
    let prices = file_config.engine.prices;
    let priced = prices.input_per_million > 0.0 || prices.output_per_million > 0.0;
    let stats = compute_stats(&outcomes, priced.then_some(&prices));
    if json {
        let text = serde_json::to_string_pretty(&stats)
            .context("serializing stats")
            .runtime()?;
        println!("{text}");
    } else {
        print!("{}", render_stats(&stats));
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect_memory(
    state_dir: &Path,
    file_config: &FileConfig,
    command: MemoryCommand,
) -> CliResult<ExitCode> {
    let state = StateDir::open(state_dir)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let memory = state
        .load_memory(file_config.engine.insight_cap)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let roles = [
        AgentRole::TestAgent,
        AgentRole::PatchAgent,
        AgentRole::ReviewAgent,
    ];

    match command {
        MemoryCommand::Ls => {
            for role in roles {
                println!(
                    "{}: {} demonstrations, {} insights",
                    role.label(),
                    memory.episodic.len(role),
                    memory.semantic.len(role)
                );
                for insight in memory.semantic.snapshot(role) {
                    let mut text = insight.text.clone();
                    if text.chars().count() > 70 {
                        text = text.chars().take(69).collect::<String>() + "…";
                    }
                    println!("  {} (used {}): {}", insight.id, insight.use_count, text);
                }
            }
        }
        MemoryCommand::Export => {
            let demos: Vec<_> = roles
                .iter()
                .flat_map(|r| memory.episodic.iter(*r).cloned().collect::<Vec<_>>())
                .collect();
            let insights: Vec<_> = roles.iter().flat_map(|r| memory.semantic.snapshot(*r)).collect();
            let doc = serde_json::json!({
                "demonstrations": demos,
                "insights": insights,
            });
            let text = serde_json::to_string_pretty(&doc)
                .context("serializing memory")
                .runtime()?;
            println!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn set_rsr(state_dir: &Path, issue_id: &str, safe: bool) -> CliResult<ExitCode> {
    let state = StateDir::open(state_dir)
        .map_err(anyhow::Error::from)
        .runtime()?;
    state
        .set_rsr_flag(issue_id, safe)
        .map_err(anyhow::Error::from)
        .runtime()?;
    println!("issue {issue_id}: regression-safe = {safe}");
    Ok(ExitCode::SUCCESS)
}
