use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use notigate_core::config::{GatewayConfig, PolicyMode};
use notigate_sim::{run, RunOptions, Scenario, SyntheticUser, Workload};
use serde::de::DeserializeOwned;

/// Runs the gateway against a synthetic workload on virtual time and writes
/// a canonical metrics report.
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Args {
    #[arg(long)]
    workload: PathBuf,
    /// JSON array of synthetic users.
    #[arg(long)]
    users: PathBuf,
    #[arg(long, default_value = "baseline")]
    mode: PolicyMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Gateway configuration (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decision log (JSONL); defaults to the report path with `.decisions.jsonl`.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Crash and recover the durable store every N commands.
    #[arg(long, default_value_t = 0)]
    crash_every: u64,
    #[arg(long, default_value_t = 3.0)]
    settle_days: f64,
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("simulate: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(args: &Args) -> Result<bool, String> {
    let workload: Workload = load(&args.workload)?;
    let users: Vec<SyntheticUser> = load(&args.users)?;
    let scenario: Option<Scenario> = args.scenario.as_deref().map(load).transpose()?;
    let config: GatewayConfig = args.config.as_deref().map(load).transpose()?.unwrap_or_default();
    let opts = RunOptions {
        config,
        mode: args.mode,
        seed: args.seed,
        settle_days: args.settle_days,
        crash_every: args.crash_every,
        ..RunOptions::default()
    };
    let out = run(&workload, &users, scenario.as_ref(), &opts).map_err(|e| e.to_string())?;
    let mut report = out.report.to_canonical();
    report.push('\n');
    fs::write(&args.out, report).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let decisions = args
        .decisions
        .clone()
        .unwrap_or_else(|| args.out.with_extension("decisions.jsonl"));
    fs::write(&decisions, out.decision_log()).map_err(|e| format!("{}: {e}", decisions.display()))?;
    match out.check() {
        Ok(()) => Ok(true),
        Err(e) => {
            eprintln!("simulate: {e}");
            Ok(false)
        }
    }
}
