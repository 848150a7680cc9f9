//! Command-line interface.
//!
//! Two subcommands cover the two ways the optimizer gets used.
//! `optimize` searches one space against one oracle and writes its
//! artifacts (`best.json`, `trace.csv`, `run_config.json`,
//! `tree_stats.json`, and `ensemble.json` for builtin oracles) to an
//! output directory. `benchmark` replays a scenario file across seeds
//! and methods and writes per-run traces plus a summary table.
//!
//! Oracles are named on the command line as `builtin:<preset>` for the
//! bundled synthetic cluster models, or `command:<path>` for an
//! external profiler. External profilers speak a one-line protocol:
//! the configuration arrives as a single JSON object on stdin and the
//! reply is one stdout line holding either a finite decimal cost or
//! the token `INFEASIBLE`. Builtin runs charge model time, so reruns
//! with the same flags are byte-identical; command runs charge wall
//! time and start in real mode.
//!
//! Exit codes: 0 on success, 2 for invalid flags or input files, 3
//! when an external oracle violates the protocol so badly that nothing
//! was ever evaluated (or its command is missing), 4 when the budget
//! ran out without a single successful evaluation. Logging is
//! controlled by the `AUTOSCOUT_LOG` environment variable.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bench::{fit_clean_ensemble, run_experiment, ModelPreset, Scenario, SyntheticClusterModel};
use crate::evaluator::{Clock, EnsembleOracle};
use crate::oracle::CommandOracle;
use crate::orchestrator::{run, RunConfig, RunOutcome};
use crate::space::ConfigSpace;
use crate::sparse::TreeOrdering;
use crate::trace::write_trace;

#[derive(Parser)]
#[command(
    name = "autoscout",
    version,
    about = "Search structured configuration spaces for low-cost settings"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Commands {
    /// Search one space for its cheapest configuration.
    Optimize(OptimizeArgs),
    /// Replay a scenario file across seeds, methods, and baselines.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct OptimizeArgs {
    /// Configuration-space JSON file.
    #[arg(long)]
    space: PathBuf,

    /// Cost oracle: builtin:<preset> or command:<path>.
    #[arg(long, value_parser = parse_oracle_flag)]
    oracle: OracleFlag,

    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 200)]
    budget_iters: u64,

    /// Stop once this much model (builtin) or wall (command) time has
    /// elapsed.
    #[arg(long)]
    budget_seconds: Option<f64>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Iterations between simulator-accuracy checkpoints.
    #[arg(long)]
    tau: Option<u64>,

    /// Simulator error tolerated before switching to real profiling.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Number of trees in the warm-up tournament.
    #[arg(long)]
    k_tournament: Option<usize>,

    /// Initial bandit exploration coefficient.
    #[arg(long)]
    c0: Option<f64>,

    /// Per-iteration decay of the exploration coefficient.
    #[arg(long)]
    gamma: Option<f64>,

    /// Concurrent external-oracle calls.
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,

    /// JSON file with explicit tournament feature orderings (an array
    /// of feature-name arrays).
    #[arg(long)]
    orderings: Option<PathBuf>,

    /// Seconds before an external oracle call is abandoned.
    #[arg(long, default_value_t = 60.0)]
    oracle_timeout: f64,

    /// Environment variable passed through to the external oracle;
    /// repeatable. When used, the child sees only these and PATH.
    #[arg(long = "oracle-env", value_name = "NAME")]
    oracle_env: Vec<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,

    /// Output directory (defaults to bench-<scenario name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
enum OracleFlag {
    Builtin(String),
    Command(PathBuf),
}

fn parse_oracle_flag(s: &str) -> Result<OracleFlag, String> {
    match s.split_once(':') {
        Some(("builtin", name)) if !name.is_empty() => Ok(OracleFlag::Builtin(name.to_string())),
        Some(("command", path)) if !path.is_empty() => {
            Ok(OracleFlag::Command(PathBuf::from(path)))
        }
        _ => Err(format!(
            "expected builtin:<preset> or command:<path>, got {s:?}"
        )),
    }
}

enum CliError {
    /// Bad flags or unreadable/invalid input files.
    Invalid(String),
    /// The external oracle's side of the protocol never worked.
    Protocol(String),
    /// The run finished but produced no usable configuration.
    NoResult(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::NoResult(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Protocol(m) | CliError::NoResult(m) => m,
        }
    }
}

fn invalid(err: impl std::fmt::Display) -> CliError {
    CliError::Invalid(err.to_string())
}

/// Entry point for the `autoscout` binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("AUTOSCOUT_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::Optimize(args) => cmd_optimize(&args),
        Commands::Benchmark(args) => cmd_benchmark(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Invalid(format!("failed to serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Invalid(format!("failed to write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_config_from(args: &OptimizeArgs) -> RunConfig {
    let defaults = RunConfig::default();
    RunConfig {
        budget_iters: args.budget_iters,
        budget_seconds: args.budget_seconds,
        seed: args.seed,
        k_tournament: args.k_tournament.unwrap_or(defaults.k_tournament),
        c0: args.c0.unwrap_or(defaults.c0),
        gamma: args.gamma.unwrap_or(defaults.gamma),
        tau: args.tau.unwrap_or(defaults.tau),
        epsilon: args.epsilon.unwrap_or(defaults.epsilon),
        ..defaults
    }
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<(), CliError> {
    let space = ConfigSpace::load_file(&args.space).map_err(invalid)?;
    let orderings = args
        .orderings
        .as_deref()
        .map(|path| TreeOrdering::load_orderings_file(&space, path))
        .transpose()
        .map_err(invalid)?;
    let cfg = run_config_from(args);
    fs::create_dir_all(&args.out)
        .map_err(|e| invalid(format!("cannot create {}: {e}", args.out.display())))?;

    let (outcome, external) = match &args.oracle {
        OracleFlag::Builtin(name) => {
            let preset = ModelPreset::builtin(name).map_err(invalid)?;
            let model = SyntheticClusterModel::new(preset);
            let ensemble = fit_clean_ensemble(&space, &model, args.seed);
            write_json(&args.out.join("ensemble.json"), &ensemble)?;
            let sim = Some(Box::new(EnsembleOracle::new(ensemble)) as Box<dyn crate::oracle::CostOracle>);
            let outcome =
                run(&space, &cfg, &model, sim, orderings, Clock::model()).map_err(invalid)?;
            (outcome, false)
        }
        OracleFlag::Command(path) => {
            if !path.is_file() {
                return Err(CliError::Protocol(format!(
                    "oracle command {} does not exist",
                    path.display()
                )));
            }
            let mut oracle = CommandOracle::new(
                path.clone(),
                Duration::from_secs_f64(args.oracle_timeout.max(0.0)),
                args.max_parallel,
            );
            if !args.oracle_env.is_empty() {
                oracle = oracle.with_env_allowlist(args.oracle_env.clone());
            }
            let outcome =
                run(&space, &cfg, &oracle, None, orderings, Clock::wall()).map_err(invalid)?;
            (outcome, true)
        }
    };

    write_json(&args.out.join("run_config.json"), &cfg)?;
    write_json(&args.out.join("tree_stats.json"), &outcome.trees)?;
    let trace_path = args.out.join("trace.csv");
    let file = File::create(&trace_path)
        .map_err(|e| invalid(format!("failed to write {}: {e}", trace_path.display())))?;
    write_trace(BufWriter::new(file), &outcome.trace_rows())
        .map_err(|e| invalid(format!("failed to write {}: {e}", trace_path.display())))?;
    println!("wrote {}", trace_path.display());

    report_best(&space, &args.out, &outcome, external)
}

fn report_best(
    space: &ConfigSpace,
    out: &Path,
    outcome: &RunOutcome,
    external: bool,
) -> Result<(), CliError> {
    match &outcome.best {
        Some((cost, config)) => {
            let best = json!({
                "cost": cost,
                "config": space.to_flat_json(config),
            });
            write_json(&out.join("best.json"), &best)?;
            println!(
                "best cost {cost} after {} real and {} simulated evaluations",
                outcome.real_evals, outcome.sim_evals
            );
            println!("{}", serde_json::to_string_pretty(&space.to_flat_json(config)).unwrap());
            Ok(())
        }
        None if external && outcome.real_evals == 0 && outcome.sim_evals == 0 => {
            Err(CliError::Protocol(
                "the oracle never returned a successful evaluation".to_string(),
            ))
        }
        None => Err(CliError::NoResult(
            "budget exhausted without a successful evaluation".to_string(),
        )),
    }
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let scenario = Scenario::load_file(&args.scenario).map_err(invalid)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("bench-{}", scenario.name)));
    let summary = run_experiment(&scenario, &out).map_err(invalid)?;

    println!(
        "scenario {}: optimum {} (threshold {})",
        summary.scenario, summary.optimum_cost, summary.threshold
    );
    for m in &summary.methods {
        let median_best = m
            .median_best_cost
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string());
        let median_evals = m
            .median_evals_to_threshold
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string());
        println!(
            "  {:>15} K={:<3} median best {median_best} | reached threshold {}/{} | median evals {median_evals}",
            m.method.label(),
            m.k,
            m.reached_threshold,
            m.seeds,
        );
    }
    println!("wrote {}", out.join("summary.csv").display());
    Ok(())
}
