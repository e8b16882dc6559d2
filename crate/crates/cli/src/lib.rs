//! Benchmark runner CLI and routing service for the APDL harness.

pub mod commands;
pub mod service;

use std::io::Write;
use std::path::PathBuf;

use apdl_harness::bench::BenchEnv;
use apdl_harness::corpus::generate_default_corpus;
use apdl_harness::scoring::report::{Metric, ReportFormat};
use clap::{Parser, Subcommand};

use commands::{CliError, RunArgs};

#[derive(Debug, Parser)]
#[command(name = "apdl-bench", version, about = "Run and score APDL recovery-strategy benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute every (case, strategy, repeat) run and write scored results.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "no_recovery,rule_only,model_only")]
        strategies: String,
        #[arg(long, default_value_t = 3)]
        repeats: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Score task completion from simulated output (the default).
        #[arg(long)]
        oracle_scorer: bool,
        /// Score task completion from a rater sheet CSV instead.
        #[arg(long, conflicts_with = "oracle_scorer")]
        rater_sheet: Option<PathBuf>,
        /// Stamp every trace event with this wall time.
        #[arg(long)]
        fixed_clock: Option<u64>,
    },
    /// Aggregate the scored runs of an output directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
    },
    /// Compare two strategies on q or t.
    Stats {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        pair: String,
        #[arg(long, default_value = "q")]
        metric: Metric,
    },
    /// Inter-rater agreement of a rater sheet.
    Agreement {
        #[arg(long)]
        sheet: PathBuf,
    },
    /// Write the default 50-task corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Serve the routing API on localhost.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Run {
            corpus,
            strategies,
            repeats,
            seed,
            out,
            parallel,
            oracle_scorer,
            rater_sheet,
            fixed_clock,
        } => commands::cmd_run(&RunArgs {
            corpus,
            strategies,
            repeats,
            seed,
            out,
            parallel,
            oracle_scorer: oracle_scorer || rater_sheet.is_none(),
            rater_sheet,
            fixed_clock,
        }),
        Command::Report { runs, format } => commands::cmd_report(&runs, format),
        Command::Stats { runs, pair, metric } => commands::cmd_stats(&runs, &pair, metric),
        Command::Agreement { sheet } => commands::cmd_agreement(&sheet),
        Command::Corpus { out, seed } => commands::cmd_corpus(&out, seed),
        Command::Serve { port, seed, workers } => {
            let state = service::AppState::new(
                service::ModuleRegistry::with_mapdl(generate_default_corpus(seed)),
                BenchEnv::default(),
                workers,
            );
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::failure(e.to_string()))?;
            rt.block_on(service::serve(port, state))
                .map_err(|e| CliError::failure(format!("serve: {e}")))?;
            Ok(String::new())
        }
    }
}

/// Parses `args` and runs the command, writing output to `out` and `err`.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return commands::EXIT_CONFIG;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            let _ = write!(out, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
