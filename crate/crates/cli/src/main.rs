//! Benchmark runner and scenario tools.
//!
//! Exit codes: 0 success, 1 usage error, 2 scenario error, 3 agent/protocol
//! error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use waysim_core::agents::{serve_policy, Zoo};
use waysim_core::engine::log::EpisodeLog;
use waysim_core::engine::EngineError;
use waysim_core::metrics::{radar_series, table_csv, MetricsRegistry};
use waysim_core::runner::{build_scenarios, dump_trace, run, RunConfig, RunError};
use waysim_core::scenario::load_bundle;

#[derive(Parser)]
#[command(name = "waysim", about = "Deterministic multi-agent driving-interaction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run benchmark episodes and record logs.
    Run(RunArgs),
    /// Compute the metrics suite from recorded episode logs.
    Evaluate(EvaluateArgs),
    /// Validate and canonicalize every scenario in a directory.
    BuildScenario(BuildArgs),
    /// Scenario tools.
    Scenario(ScenarioArgs),
    /// Serve a zoo policy as a remote agent endpoint.
    ServeAgent(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; repeat to sample several round-robin.
    #[arg(long = "scenario", required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    episodes: u32,
    /// Base seed; episode i runs with seed + i. Defaults to the first
    /// scenario's seed field.
    #[arg(long)]
    seed: Option<u64>,
    /// Mission assignments: a0=keep_lane,a1=remote:127.0.0.1:9000
    #[arg(long, value_delimiter = ',')]
    agents: Vec<String>,
    /// Directory for episode logs.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Accepted for compatibility; the runner is always headless.
    #[arg(long, default_value_t = true)]
    headless: bool,
    /// Print a plain-text per-step trace of every episode.
    #[arg(long, default_value_t = false)]
    dump_trace: bool,
    /// Gzip recorded logs.
    #[arg(long, default_value_t = false)]
    gzip: bool,
    /// Endpoint manifest (JSON name -> host:port) to extend the zoo.
    #[arg(long)]
    endpoints: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Episode log files (.jsonl or .jsonl.gz).
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Output directory for report files; stdout summary otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    /// Directory containing scenario JSON files and their maps/.
    dir: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    #[command(subcommand)]
    command: ScenarioCommand,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Parse and bind one scenario file, reporting any error.
    Validate { file: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    /// Zoo policy to serve.
    #[arg(long, default_value = "keep_lane")]
    policy: String,
    #[arg(long, default_value = "127.0.0.1:7788")]
    bind: String,
}

const EXIT_USAGE: u8 = 1;
const EXIT_SCENARIO: u8 = 2;
const EXIT_AGENT: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::BuildScenario(args) => cmd_build(args),
        Command::Scenario(args) => match args.command {
            ScenarioCommand::Validate { file } => cmd_validate(file),
        },
        Command::ServeAgent(args) => cmd_serve(args),
    }
}

fn run_error_code(e: &RunError) -> u8 {
    match e {
        RunError::BadConfig(_) => EXIT_USAGE,
        RunError::Scenario(_) | RunError::Log(_) => EXIT_SCENARIO,
        RunError::Agent(_) => EXIT_AGENT,
        RunError::Engine(EngineError::Agent(_)) => EXIT_AGENT,
        RunError::Engine(_) => EXIT_SCENARIO,
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut zoo = Zoo::standard();
    if let Some(path) = &args.endpoints {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: endpoints manifest {}: {e}", path.display());
                return ExitCode::from(EXIT_USAGE);
            }
        };
        if let Err(e) = zoo.load_endpoint_manifest(&text) {
            eprintln!("error: endpoints manifest: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let mut assignments = BTreeMap::new();
    for pair in &args.agents {
        match pair.split_once('=') {
            Some((agent, reference)) => {
                assignments.insert(agent.to_string(), reference.to_string());
            }
            None => {
                eprintln!("error: bad --agents entry `{pair}` (want agent=policy)");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }

    let seed = match args.seed {
        Some(s) => s,
        None => match load_bundle(&args.scenarios[0]) {
            Ok(b) => b.spec.seed,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_SCENARIO);
            }
        },
    };

    let config = RunConfig {
        scenarios: args.scenarios,
        episodes: args.episodes,
        seed,
        assignments,
        record_dir: args.record,
        parallel: args.parallel,
        gzip: args.gzip,
    };
    match run(&config, Arc::new(zoo)) {
        Ok(outcome) => {
            if args.dump_trace {
                for log in &outcome.logs {
                    print!("{}", dump_trace(log));
                }
            }
            for ep in &outcome.episodes {
                let done = ep.completed.values().filter(|c| **c).count();
                let crashed = ep.collided.values().filter(|c| **c).count();
                println!(
                    "episode {:>3} {} seed={} steps={} completed={}/{} collided={}",
                    ep.episode,
                    ep.scenario,
                    ep.seed,
                    ep.steps,
                    done,
                    ep.completed.len(),
                    crashed
                );
            }
            println!("{}", outcome.summary_line());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run_error_code(&e))
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> ExitCode {
    let mut logs = Vec::new();
    let mut bad_versions = Vec::new();
    for path in &args.logs {
        match EpisodeLog::read_from(path) {
            Ok(log) => logs.push(log),
            Err(waysim_core::engine::log::LogError::Version { found, .. }) => {
                bad_versions.push(format!("{} (format {found})", path.display()));
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(EXIT_SCENARIO);
            }
        }
    }
    if !bad_versions.is_empty() {
        eprintln!("error: version-mismatched logs:");
        for b in bad_versions {
            eprintln!("  {b}");
        }
        return ExitCode::from(EXIT_SCENARIO);
    }

    let registry = MetricsRegistry::standard();
    let mut groups = BTreeMap::new();
    let mut by_scenario: BTreeMap<String, Vec<EpisodeLog>> = BTreeMap::new();
    for log in logs {
        by_scenario
            .entry(log.header.scenario.clone())
            .or_default()
            .push(log);
    }
    for (scenario, group) in &by_scenario {
        match registry.compute(group) {
            Ok(report) => {
                groups.insert(scenario.clone(), report);
            }
            Err(e) => {
                eprintln!("error: {scenario}: {e}");
                return ExitCode::from(EXIT_SCENARIO);
            }
        }
    }

    let csv = table_csv(&groups);
    let radar = radar_series(&groups);
    match &args.out {
        Some(dir) => {
            if let Err(e) = std::fs::create_dir_all(dir) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_SCENARIO);
            }
            let report_json = serde_json::to_string_pretty(&groups).unwrap();
            for (name, content) in [
                ("metrics.json", report_json),
                ("table.csv", csv.clone()),
                ("radar.json", serde_json::to_string_pretty(&radar).unwrap()),
            ] {
                let path = dir.join(name);
                let tmp = path.with_extension("tmp");
                if std::fs::write(&tmp, &content)
                    .and_then(|_| std::fs::rename(&tmp, &path))
                    .is_err()
                {
                    eprintln!("error: writing {}", path.display());
                    return ExitCode::from(EXIT_SCENARIO);
                }
            }
            println!(
                "wrote metrics.json, table.csv, radar.json to {}",
                dir.display()
            );
        }
        None => {
            print!("{csv}");
        }
    }
    for (scenario, report) in &groups {
        println!("{scenario}: {}", report.table_cell());
    }
    ExitCode::SUCCESS
}

fn cmd_build(args: BuildArgs) -> ExitCode {
    match build_scenarios(&args.dir) {
        Ok(bundles) => {
            for (path, hash) in bundles {
                println!("{hash}  {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run_error_code(&e))
        }
    }
}

fn cmd_validate(file: PathBuf) -> ExitCode {
    match load_bundle(&file) {
        Ok(bound) => {
            println!(
                "ok: {} ({} missions, {} flows, {} bubbles, {} lanes)",
                bound.name,
                bound.missions.len(),
                bound.flows.len(),
                bound.spec.bubbles.len(),
                bound.network.lane_count()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            ExitCode::from(EXIT_SCENARIO)
        }
    }
}

fn cmd_serve(args: ServeArgs) -> ExitCode {
    let zoo = Zoo::standard();
    if zoo.entry(&args.policy).is_none() {
        eprintln!("error: unknown policy `{}`", args.policy);
        return ExitCode::from(EXIT_USAGE);
    }
    let listener = match std::net::TcpListener::bind(&args.bind) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: bind {}: {e}", args.bind);
            return ExitCode::from(EXIT_AGENT);
        }
    };
    println!("serving {} on {}", args.policy, args.bind);
    match serve_policy(listener, &zoo, &args.policy) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_AGENT)
        }
    }
}
