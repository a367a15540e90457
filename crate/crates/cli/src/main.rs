//! `kforge`: evaluate generated operator kernels against a framework checkout.
//!
//! Exit codes: 0 success, 2 compile failure, 3 verification failure,
//! 4 infrastructure or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, TransportSpec};

pub const EXIT_INFRA: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "kforge", version, about = "Kernel evaluation harness")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a task manifest and, optionally, that a framework tree can host its tasks.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        framework: Option<PathBuf>,
    },
    /// Inject, build, verify and benchmark one or more candidates.
    Eval {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding the candidate's files; repeat to evaluate a group in parallel.
        #[arg(long = "candidate", required = true)]
        candidates: Vec<PathBuf>,
    },
    /// Run the iterative generate/diagnose/refine loop on one task.
    Agent {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Prompt bank (TOML with `headers` and `examples` tables).
        #[arg(long)]
        bank: PathBuf,
        /// Replay model replies from a JSON file instead of calling the endpoint in KF_LLM_ENDPOINT.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// JSON-lines file of past iterations shared across episodes.
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Where to write the episode summary (default: stdout only).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Time the unmodified operator and cache it as the task's baseline.
    Bench {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Aggregate a results file into compile, correctness and fast_p rates.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Speedup thresholds for fast_p.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
        thresholds: Vec<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the training reward for one outcome or for every record in a results file.
    Reward {
        #[arg(long, conflicts_with_all = ["compiled", "correct", "baseline_ms", "generated_ms"])]
        results: Option<PathBuf>,
        #[arg(long)]
        compiled: bool,
        #[arg(long)]
        correct: bool,
        #[arg(long)]
        baseline_ms: Option<f64>,
        #[arg(long)]
        generated_ms: Option<f64>,
        /// Add the partial credit for compiling.
        #[arg(long)]
        shaped: bool,
    },
    /// Manage framework checkouts.
    Workspace {
        #[command(subcommand)]
        action: WorkspaceAction,
    },
}

#[derive(Debug, Subcommand)]
enum WorkspaceAction {
    /// Copy a framework tree for independent use.
    Clone {
        #[arg(long)]
        framework: PathBuf,
        #[arg(long)]
        label: String,
        /// Parent directory for the copy (default: next to the original).
        #[arg(long)]
        into: Option<PathBuf>,
    },
    /// Put back operator sources left injected by an interrupted run.
    Restore {
        #[arg(long)]
        framework: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TargetArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    framework: PathBuf,
    #[arg(long)]
    task: String,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `local` or `device:<serial>`.
    #[arg(long, default_value = "local")]
    transport: TransportSpec,
    /// Bridge executable used by device transports.
    #[arg(long, default_value = "adb")]
    bridge: PathBuf,
    /// Staging directory on the execution target.
    #[arg(long)]
    staging: Option<String>,
    #[arg(long, default_value_t = kforge_core::verify::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Scale the tolerance by the larger magnitude of each element pair.
    #[arg(long)]
    relative: bool,
    #[arg(long, default_value_t = kforge_core::bench::DEFAULT_ITERS)]
    iters: u32,
    #[arg(long, default_value_t = kforge_core::bench::DEFAULT_WARMUP)]
    warmup: u32,
    /// Stop after verification (local transport only).
    #[arg(long)]
    no_bench: bool,
    /// Benchmark without waiting for the device to go idle.
    #[arg(long)]
    skip_util_gate: bool,
    #[arg(long, default_value_t = 0.10)]
    util_threshold: f64,
    /// Ignore pinned and cached baselines and measure again.
    #[arg(long)]
    remeasure_baseline: bool,
    /// JSON file of measured baselines keyed by endpoint and task.
    #[arg(long)]
    baseline_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 10)]
    max_iters: u32,
    /// Append one JSON record per evaluated candidate here.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Tag stored with every record of this invocation.
    #[arg(long)]
    run_id: Option<String>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            transport: self.transport.clone(),
            bridge: self.bridge.clone(),
            staging: self.staging.clone(),
            tolerance: self.tolerance,
            relative_tolerance: self.relative,
            iters: self.iters,
            warmup: self.warmup,
            bench: !self.no_bench,
            util_gate: !self.skip_util_gate,
            util_threshold: self.util_threshold,
            jobs: self.jobs,
            max_iters: self.max_iters,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INFRA)
        }
    }
}
