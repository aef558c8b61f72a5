use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use triaccel::control::RunMode;
use triaccel::harness::{self, score, ExperimentPlan};
use triaccel::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "triaccel",
    version,
    about = "Closed-loop precision, curvature and batch control on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment plan and write CSV telemetry.
    Run {
        /// Plan file (TOML). Without it every mode runs with default settings.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated seeds, overriding the plan.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated modes, overriding the plan.
        #[arg(long = "mode", value_delimiter = ',')]
        modes: Option<Vec<RunMode>>,
        /// Concurrent runs, overriding the plan.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute efficiency scores from a runs or summary CSV.
    Score { csv: PathBuf },
    /// Recompute the published efficiency scores from their printed inputs.
    PaperCheck,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(e) if e.is_io_error() => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run {
            plan,
            out,
            seeds,
            modes,
            workers,
        } => {
            let mut plan = match plan {
                Some(path) => ExperimentPlan::load(&path)?,
                None => ExperimentPlan::new(RunMode::ALL.to_vec(), vec![1, 2, 3]),
            };
            if let Some(seeds) = seeds {
                plan.plan.seeds = seeds;
            }
            if let Some(modes) = modes {
                plan.plan.modes = modes;
            }
            if let Some(w) = workers {
                plan.plan.workers = w;
            }
            let outcome = harness::run_experiment(&plan, &out)?;
            print!("{}", harness::format_summary(&outcome.summary));
            println!("artifacts written to {}", out.display());
            let mut code = 0;
            for r in outcome.records.iter().filter(|r| r.aborted.is_some()) {
                eprintln!(
                    "aborted: {} seed {}: {}",
                    r.mode,
                    r.seed,
                    r.aborted.as_deref().unwrap_or_default()
                );
                code = EXIT_ABORTED;
            }
            Ok(code)
        }
        Command::Score { csv } => {
            let rows = harness::rescore(&csv)?;
            let mut code = 0;
            for r in &rows {
                let flag = match r.consistent {
                    Some(true) => "ok",
                    Some(false) => {
                        code = EXIT_CHECK_FAILED;
                        "MISMATCH"
                    }
                    None => "",
                };
                println!(
                    "{:<32} stored {:>14.6e} recomputed {:>14.6e} {flag}",
                    r.label, r.stored, r.recomputed
                );
            }
            Ok(code)
        }
        Command::PaperCheck => {
            let checks = score::check_published_scores();
            let mut failed = 0;
            for c in &checks {
                let row = c.row;
                println!(
                    "{:<10} {:<16} {:<14} acc {:>5.1} time {:>5.1} vram {:.2}  printed {:>6.2} recomputed {:>6.2}  {}",
                    row.dataset,
                    row.architecture,
                    row.method,
                    row.accuracy_pct,
                    row.time_s,
                    row.vram_gb,
                    row.score,
                    c.recomputed,
                    if c.ok { "ok" } else { "FAIL" }
                );
                failed += usize::from(!c.ok);
            }
            println!(
                "{}/{} rows within ±{}",
                checks.len() - failed,
                checks.len(),
                score::PUBLISHED_SCORE_TOLERANCE
            );
            Ok(if failed == 0 { 0 } else { EXIT_CHECK_FAILED })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
