//! Subcommand implementations. Each returns the text to print, or an error
//! carrying the process exit code.

use std::path::{Path, PathBuf};

use apdl_harness::bench::{
    run_benchmark, BenchEnv, BenchOptions, BenchmarkPlan, Scorer, CORPUS_FILE, SCORED_RUNS_FILE,
};
use apdl_harness::corpus::{generate_default_corpus, load_corpus, Corpus};
use apdl_harness::orchestrator::trace::Clock;
use apdl_harness::recovery::Policy;
use apdl_harness::scoring::report::{build_report, compare_pair, render_report, Metric, ReportFormat};
use apdl_harness::scoring::{agreement, read_scored_runs, RaterSheet, ScoredRun};
use thiserror::Error;

pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVARIANT,
            message: message.into(),
        }
    }
}

pub fn parse_strategies(list: &str) -> Result<Vec<Policy>, CliError> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p: Policy = name.parse().map_err(|e: apdl_harness::recovery::UnknownPolicy| CliError::config(e.to_string()))?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(CliError::config("no strategies given"));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub corpus: Option<PathBuf>,
    pub strategies: String,
    pub repeats: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub parallel: usize,
    pub oracle_scorer: bool,
    pub rater_sheet: Option<PathBuf>,
    /// Fixed trace timestamp, for byte-reproducible traces.
    pub fixed_clock: Option<u64>,
}

impl RunArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            corpus: None,
            strategies: "no_recovery,rule_only,model_only".into(),
            repeats: 3,
            seed: 42,
            out: out.into(),
            parallel: 1,
            oracle_scorer: true,
            rater_sheet: None,
            fixed_clock: None,
        }
    }
}

fn load_sheet(path: &Path) -> Result<RaterSheet, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    RaterSheet::read(file).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn cmd_run(args: &RunArgs) -> Result<String, CliError> {
    let strategies = parse_strategies(&args.strategies)?;
    let corpus = match &args.corpus {
        Some(p) => load_corpus(p).map_err(|e| CliError::config(e.to_string()))?,
        None => generate_default_corpus(args.seed),
    };
    let scorer = match (&args.rater_sheet, args.oracle_scorer) {
        (Some(_), true) => return Err(CliError::config("--oracle-scorer and --rater-sheet are exclusive")),
        (Some(p), false) => Scorer::Raters(load_sheet(p)?),
        (None, _) => Scorer::Oracle,
    };
    let plan = BenchmarkPlan {
        corpus_path: args.corpus.clone(),
        strategies,
        repeats: args.repeats,
        seed: args.seed,
        out_dir: args.out.clone(),
        parallelism: args.parallel,
    };
    let env = BenchEnv {
        clock: args.fixed_clock.map_or(Clock::System, Clock::Fixed),
        scorer,
        ..BenchEnv::default()
    };
    let outcome = run_benchmark(&plan, &corpus, &env, &BenchOptions::default()).map_err(|e| CliError {
        code: e.exit_code(),
        message: e.to_string(),
    })?;
    let mut text = format!(
        "{} case-runs written to {}\n\n",
        outcome.runs.len(),
        args.out.display()
    );
    text.push_str(&render_report(&outcome.report, ReportFormat::Md));
    Ok(text)
}

/// Reads the scored runs and the corpus of a benchmark output directory.
pub fn load_runs_dir(dir: &Path) -> Result<(Vec<ScoredRun>, Corpus), CliError> {
    let csv_path = dir.join(SCORED_RUNS_FILE);
    let file = std::fs::File::open(&csv_path)
        .map_err(|_| CliError::config(format!("{} has no {SCORED_RUNS_FILE}", dir.display())))?;
    let runs = read_scored_runs(file).map_err(|e| CliError::config(format!("{}: {e}", csv_path.display())))?;
    if runs.is_empty() {
        return Err(CliError::config(format!("{} contains no runs", csv_path.display())));
    }
    let corpus = load_corpus(&dir.join(CORPUS_FILE)).map_err(|e| CliError::config(e.to_string()))?;
    Ok((runs, corpus))
}

pub fn cmd_report(dir: &Path, format: ReportFormat) -> Result<String, CliError> {
    let (runs, corpus) = load_runs_dir(dir)?;
    let report = build_report(&runs, &apdl_harness::bench::categories(&corpus))
        .map_err(|e| CliError::config(e.to_string()))?;
    let text = render_report(&report, format);
    let path = dir.join(format!("report.{}", format.extension()));
    std::fs::write(&path, &text).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
    Ok(text)
}

pub fn cmd_stats(dir: &Path, pair: &str, metric: Metric) -> Result<String, CliError> {
    let (a, b) = pair
        .split_once(':')
        .ok_or_else(|| CliError::config(format!("pair `{pair}` must look like A:B")))?;
    let a: Policy = a.parse().map_err(|e: apdl_harness::recovery::UnknownPolicy| CliError::config(e.to_string()))?;
    let b: Policy = b.parse().map_err(|e: apdl_harness::recovery::UnknownPolicy| CliError::config(e.to_string()))?;
    let (runs, _) = load_runs_dir(dir)?;
    let cmp = compare_pair(&runs, a, b, metric).map_err(|e| CliError::config(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&cmp).expect("comparison serializes") + "\n")
}

pub fn cmd_agreement(sheet: &Path) -> Result<String, CliError> {
    let sheet = load_sheet(sheet)?;
    let a = agreement(&sheet).map_err(|e| CliError::config(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&a).expect("agreement serializes") + "\n")
}

pub fn cmd_corpus(out: &Path, seed: u64) -> Result<String, CliError> {
    let corpus = generate_default_corpus(seed);
    corpus.save(out).map_err(|e| CliError::failure(e.to_string()))?;
    Ok(format!("{} tasks written to {}\n", corpus.tasks.len(), out.display()))
}
