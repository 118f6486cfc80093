//! `cpsnet` — run, batch, compare, and validate seeded scenarios.
//!
//! Exit codes: 0 clean, 2 config error, 3 invariant-audit failure,
//! 4 plant divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpsnet_core::harness::{
    compare_files, run_batch, run_scenario, RunOptions, EXIT_CLEAN, EXIT_CONFIG,
};
use cpsnet_core::scenario::ScenarioConfig;

#[derive(Parser)]
#[command(name = "cpsnet", version, about = "Cyber-physical network co-simulation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics into the output directory.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.jsonl and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the event-trace log (requires --out).
        #[arg(long)]
        trace: bool,
    },
    /// Run N seeds of one scenario and aggregate the results.
    Batch {
        config: PathBuf,
        /// Number of seeds, starting at the config's seed.
        #[arg(long)]
        seeds: u64,
        /// Worker threads (instances are independent).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory for per-seed runs and aggregate.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two summary (or aggregate) JSON files metric by metric.
    Compare { baseline: PathBuf, treatment: PathBuf },
    /// Validate a scenario config and exit.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    ScenarioConfig::load(path).map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(EXIT_CONFIG as u8)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            trace,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let opts = RunOptions {
                seed_override: seed,
                out_dir: out,
                trace,
            };
            match run_scenario(&cfg, &opts) {
                Ok(art) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&art.summary).expect("summary serializes")
                    );
                    for failure in &art.audit_failures {
                        eprintln!("audit: {failure}");
                    }
                    ExitCode::from(art.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(EXIT_CONFIG as u8)
                }
            }
        }
        Command::Batch {
            config,
            seeds,
            jobs,
            out,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_batch(&cfg, seeds, jobs, out.as_deref()) {
                Ok(batch) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&batch).expect("batch serializes")
                    );
                    let worst = batch.per_seed.iter().map(|p| p.exit_code).max().unwrap_or(0);
                    ExitCode::from(worst.clamp(EXIT_CLEAN, 4) as u8)
                }
                Err(e) => {
                    eprintln!("batch failed: {e}");
                    ExitCode::from(EXIT_CONFIG as u8)
                }
            }
        }
        Command::Compare { baseline, treatment } => match compare_files(&baseline, &treatment) {
            Ok(deltas) => {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&deltas).expect("deltas serialize")
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("compare failed: {e}");
                ExitCode::from(EXIT_CONFIG as u8)
            }
        },
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!(
                    "ok: {} nodes, {} links, seed {}, duration {} us",
                    cfg.topology.nodes.len(),
                    cfg.topology.links.len(),
                    cfg.seed(),
                    cfg.duration().micros()
                );
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
    }
}
