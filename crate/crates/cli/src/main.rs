//! `aspm`: build, optimize, assemble, train, verify and inspect policy models.
//!
//! Exit codes: 0 success (or safe verdict), 3 unsafe verdict, 1 any error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "aspm",
    version,
    about = "Action-based safety policy models for agent guardrails"
)]
pub struct Cli {
    /// TOML configuration; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print human-readable summaries instead of JSON.
    #[arg(long, global = true)]
    pub human: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract policies and rules from documents into a model.
    Build(BuildArgs),
    /// Refine vague rules and merge redundant predicates.
    Optimize(OptimizeArgs),
    /// Cluster predicates and attach a rule circuit to every action.
    Assemble(AssembleArgs),
    /// Learn circuit weights from labeled examples.
    Train(TrainArgs),
    /// Check a trajectory against an assembled model.
    Verify(VerifyArgs),
    /// Show a model's predicates, rules and circuits.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// Directory of canned completions named by prompt hash.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// JSON embedding fixture; predicates it lacks use the hashing embedder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Policy documents, or directories of .md/.txt documents.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
    #[arg(long)]
    pub organization: Option<String>,
    /// Maximum provider calls.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub repair_retries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Peers averaged into a predicate's vagueness.
    #[arg(long)]
    pub k: Option<usize>,
    /// Maximum refinements applied.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub sim_threshold: Option<f64>,
    /// `none`, `fixture:<path>` or `provider`.
    #[arg(long, default_value = "none")]
    pub refiner: String,
    /// `none`, `fixture:<path>` or `provider`.
    #[arg(long, default_value = "none")]
    pub merger: String,
    /// Few-shot examples inserted into provider prompts.
    #[arg(long)]
    pub few_shot: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Number of predicate clusters.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sim_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Line-delimited labeled examples.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Line-delimited trajectory steps.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// JSON description of the verification tools.
    #[arg(long)]
    pub tools: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Verify only this step (0-based); earlier steps still feed history.
    #[arg(long)]
    pub step: Option<usize>,
    /// Long-term workflow store, created if missing.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Sum over completions of uncertain predicates.
    #[arg(long)]
    pub marginalize: bool,
    /// Also write the verdict document here.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Show one rule by id.
    #[arg(long)]
    pub rule: Option<String>,
    /// Show the circuit of one action.
    #[arg(long)]
    pub circuit: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
