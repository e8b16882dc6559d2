//! Benchmark runner: every (task, strategy, repeat) of a plan, scored and
//! reported, with per-run traces and checkpoints under one output directory.
//!
//! ```text
//! <out>/corpus.json
//! <out>/traces/<run_id>.jsonl
//! <out>/checkpoints/<run_id>.json
//! <out>/artifacts/<run_id>/
//! <out>/records.jsonl
//! <out>/scored_runs.csv
//! <out>/report.md, <out>/report.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Category, Corpus, CorpusError, TaskSpec};
use crate::model::{clean_script, ModelClient, ScriptedModel};
use crate::orchestrator::trace::{checkpoint_resume, count_events, lint_trace, Clock, EventKind, TraceError};
use crate::orchestrator::{drive, CaseRunRecord, Collaborators, OrchestratorError, RunIdentity, RunOptions, RunOutput, RunState};
use crate::recovery::{Policy, StrategyConfig};
use crate::scoring::report::{build_report, render_report, BenchmarkReport, ReportFormat};
use crate::scoring::{autonomy_score, oracle_t, scored_runs_to_csv, RaterSheet, ScoredRun, ScoringError};
use crate::seed::mix;
use crate::solver::{plot_count, SimulatedBackend, SolverBackend};

pub const SCORED_RUNS_FILE: &str = "scored_runs.csv";
pub const CORPUS_FILE: &str = "corpus.json";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub corpus_path: Option<PathBuf>,
    pub strategies: Vec<Policy>,
    pub repeats: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub parallelism: usize,
}

impl BenchmarkPlan {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_path: None,
            strategies: Policy::BENCHMARK.to_vec(),
            repeats: 3,
            seed: 42,
            out_dir: out_dir.into(),
            parallelism: 1,
        }
    }

    pub fn run_count(&self, corpus: &Corpus) -> usize {
        corpus.tasks.len() * self.strategies.len() * self.repeats as usize
    }
}

/// How task-completion scores are assigned.
#[derive(Debug, Clone, Default)]
pub enum Scorer {
    #[default]
    Oracle,
    Raters(RaterSheet),
}

#[derive(Clone)]
pub struct BenchEnv {
    pub model: Arc<dyn ModelClient>,
    pub backend: Arc<dyn SolverBackend>,
    pub clock: Clock,
    pub scorer: Scorer,
}

impl Default for BenchEnv {
    fn default() -> Self {
        Self {
            model: Arc::new(ScriptedModel::default()),
            backend: Arc::new(SimulatedBackend::new()),
            clock: Clock::System,
            scorer: Scorer::Oracle,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("benchmark interrupted after {0} steps; rerun to resume")]
    Interrupted(usize),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl BenchError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) | BenchError::Corpus(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed of one case-run; independent of the strategy so that strategies
/// face identical draws.
pub fn run_seed(base_seed: u64, case_id: u32, repeat: u32) -> u64 {
    mix(&[base_seed, u64::from(case_id), u64::from(repeat)])
}

/// Stable run id: first 16 hex digits of a digest over the run coordinates.
pub fn run_id(case_id: u32, strategy: Policy, repeat: u32, seed: u64) -> String {
    let digest = Sha256::digest(format!("{case_id}|{strategy}|{repeat}|{seed}").as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// One scheduled case-run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub case_id: u32,
    pub strategy: Policy,
    pub repeat: u32,
}

pub struct JobResult {
    pub job: Job,
    pub output: RunOutput,
    pub scored: ScoredRun,
}

/// Checks the trace-level laws of a finished run.
pub fn check_run(output: &RunOutput, policy: Policy) -> Result<(), String> {
    let cfg = StrategyConfig::for_policy(policy);
    let executed = count_events(&output.events, EventKind::Executed) as u32;
    let within = match policy {
        Policy::NoRecovery => executed == 1,
        _ => (1..=cfg.budget_b).contains(&executed),
    };
    if !within {
        return Err(format!("{} executions under {policy}", executed));
    }
    if let Some(v) = lint_trace(&output.events).first() {
        return Err(format!("pairing violation at event {}: {}", v.at, v.reason));
    }
    if output.record.retries + 1 != executed {
        return Err("retries do not match executions".into());
    }
    Ok(())
}

/// Scores a finished run.
pub fn score_run(output: &RunOutput, task: &TaskSpec, seed: u64, scorer: &Scorer) -> Result<ScoredRun, ScoringError> {
    let r = &output.record;
    let t = match scorer {
        Scorer::Oracle => oracle_t(r, plot_count(&clean_script(task, seed))),
        Scorer::Raters(sheet) => sheet
            .consensus_t(r.case_id, r.strategy, r.repeat_index)
            .ok_or_else(|| ScoringError::OutOfRange(format!("no rating for case {} {} {}", r.case_id, r.strategy, r.repeat_index)))?,
    };
    ScoredRun::new(r, t, autonomy_score(&output.events)?)
}

/// Runs (or resumes) a single job. With `out_dir` set, traces, checkpoints
/// and artifacts are written under it.
pub fn execute_job(
    job: Job,
    task: &TaskSpec,
    base_seed: u64,
    env: &BenchEnv,
    out_dir: Option<&Path>,
    interrupt: &mut dyn FnMut(&RunState) -> bool,
) -> Result<JobResult, BenchError> {
    let seed = run_seed(base_seed, job.case_id, job.repeat);
    let id = run_id(job.case_id, job.strategy, job.repeat, seed);
    let trace_ref = format!("traces/{id}.jsonl");
    let opts = RunOptions {
        trace_path: out_dir.map(|d| d.join(&trace_ref)),
        checkpoint_path: out_dir.map(|d| d.join("checkpoints").join(format!("{id}.json"))),
        artifact_dir: out_dir.map(|d| d.join("artifacts").join(&id)),
        clock: env.clock,
        token_budget: 0,
    };
    let strategy = StrategyConfig::for_policy(job.strategy);
    let state = match &opts.checkpoint_path {
        Some(p) if p.exists() => {
            let s = checkpoint_resume(p)?;
            if s.case_id != job.case_id || s.strategy != strategy || s.seed != seed {
                return Err(BenchError::Invariant(format!("checkpoint {} belongs to another run", p.display())));
            }
            s
        }
        _ => RunState::new(
            task,
            strategy,
            seed,
            RunIdentity {
                run_id: id,
                repeat_index: job.repeat,
                trace_ref,
            },
            0,
        ),
    };
    let collab = Collaborators {
        model: env.model.as_ref(),
        backend: env.backend.as_ref(),
    };
    let output = drive(state, task, &collab, &opts, interrupt).map_err(|e| match e {
        OrchestratorError::Interrupted(_) => BenchError::Interrupted(0),
        OrchestratorError::InternalInvariantViolation { .. } => BenchError::Invariant(e.to_string()),
        OrchestratorError::Trace(t) => BenchError::Trace(t),
    })?;
    check_run(&output, job.strategy).map_err(|e| BenchError::Invariant(format!("run {}: {e}", output.record.trace_ref)))?;
    let scored = score_run(&output, task, seed, &env.scorer)?;
    Ok(JobResult { job, output, scored })
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Stop after this many orchestrator steps across all runs, leaving
    /// checkpoints behind. Used to exercise resume.
    pub interrupt_after_steps: Option<usize>,
}

pub struct BenchOutcome {
    pub runs: Vec<ScoredRun>,
    pub records: Vec<CaseRunRecord>,
    pub report: BenchmarkReport,
}

pub fn jobs(plan: &BenchmarkPlan, corpus: &Corpus) -> Vec<Job> {
    let mut out = Vec::with_capacity(plan.run_count(corpus));
    for task in &corpus.tasks {
        for &strategy in &plan.strategies {
            for repeat in 0..plan.repeats {
                out.push(Job {
                    case_id: task.case_id,
                    strategy,
                    repeat,
                });
            }
        }
    }
    out
}

pub fn categories(corpus: &Corpus) -> BTreeMap<u32, Category> {
    corpus.tasks.iter().map(|t| (t.case_id, t.category)).collect()
}

fn validate_plan(plan: &BenchmarkPlan) -> Result<(), BenchError> {
    if plan.strategies.is_empty() {
        return Err(BenchError::Config("no strategies selected".into()));
    }
    if plan.repeats == 0 {
        return Err(BenchError::Config("repeats must be at least 1".into()));
    }
    if plan.parallelism == 0 {
        return Err(BenchError::Config("parallelism must be at least 1".into()));
    }
    Ok(())
}

/// Executes the whole plan. Finished runs found in the output directory are
/// reused; interrupted ones resume from their checkpoint.
pub fn run_benchmark(
    plan: &BenchmarkPlan,
    corpus: &Corpus,
    env: &BenchEnv,
    opts: &BenchOptions,
) -> Result<BenchOutcome, BenchError> {
    validate_plan(plan)?;
    corpus.validate()?;
    let out = plan.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let corpus_file = out.join(CORPUS_FILE);
    std::fs::write(&corpus_file, corpus.to_json()).map_err(io_err(&corpus_file))?;

    let jobs = jobs(plan, corpus);
    let next = AtomicUsize::new(0);
    let steps = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<(ScoredRun, CaseRunRecord)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let first_error: Mutex<Option<BenchError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..plan.parallelism.min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&job) = jobs.get(i) else {
                    return;
                };
                let task = corpus.task(job.case_id).expect("jobs come from the corpus");
                let mut hook = |_: &RunState| {
                    let n = steps.fetch_add(1, Ordering::SeqCst) + 1;
                    opts.interrupt_after_steps.is_some_and(|limit| n >= limit)
                };
                match execute_job(job, task, plan.seed, env, Some(out), &mut hook) {
                    Ok(r) => results.lock().expect("results lock").push((r.scored, r.output.record)),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        first_error.lock().expect("error lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(match e {
            BenchError::Interrupted(_) => BenchError::Interrupted(steps.load(Ordering::SeqCst)),
            other => other,
        });
    }
    let mut done = results.into_inner().expect("results lock");
    done.sort_by_key(|(s, _)| s.key());
    let (runs, records): (Vec<ScoredRun>, Vec<CaseRunRecord>) = done.into_iter().unzip();

    let records_path = out.join(RECORDS_FILE);
    let lines: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    std::fs::write(&records_path, lines).map_err(io_err(&records_path))?;

    let csv_path = out.join(SCORED_RUNS_FILE);
    std::fs::write(&csv_path, scored_runs_to_csv(&runs)).map_err(io_err(&csv_path))?;
    let report = build_report(&runs, &categories(corpus))?;
    for format in [ReportFormat::Md, ReportFormat::Json] {
        let path = out.join(format!("report.{}", format.extension()));
        std::fs::write(&path, render_report(&report, format)).map_err(io_err(&path))?;
    }
    Ok(BenchOutcome { runs, records, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_default_corpus;

    fn small_corpus() -> Corpus {
        let mut c = generate_default_corpus(42);
        c.tasks.retain(|t| [1, 2, 3, 8, 21, 36, 47].contains(&t.case_id) || !t.fault_profile.is_clean() && t.case_id < 20);
        c
    }

    fn env() -> BenchEnv {
        BenchEnv {
            clock: Clock::Fixed(0),
            ..BenchEnv::default()
        }
    }

    #[test]
    fn run_ids_are_stable_and_distinct() {
        let a = run_id(1, Policy::ModelOnly, 0, 5);
        assert_eq!(a, run_id(1, Policy::ModelOnly, 0, 5));
        assert_eq!(a.len(), 16);
        assert_ne!(a, run_id(1, Policy::RuleOnly, 0, 5));
        assert_ne!(a, run_id(1, Policy::ModelOnly, 1, 5));
        assert_eq!(run_seed(42, 3, 1), run_seed(42, 3, 1));
        assert_ne!(run_seed(42, 3, 1), run_seed(42, 3, 2));
    }

    #[test]
    fn default_plan_has_450_runs() {
        let plan = BenchmarkPlan::new("unused");
        assert_eq!(plan.run_count(&generate_default_corpus(42)), 450);
    }

    #[test]
    fn bad_plans_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = BenchmarkPlan::new(dir.path().join("o"));
        plan.repeats = 0;
        let err = run_benchmark(&plan, &small_corpus(), &env(), &BenchOptions::default()).err().unwrap();
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("o").exists());
    }

    #[test]
    fn parallel_interrupted_and_resumed_runs_agree() {
        let corpus = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        let mut plan = BenchmarkPlan::new(dir.path().join("serial"));
        plan.repeats = 2;
        let serial = run_benchmark(&plan, &corpus, &env(), &BenchOptions::default()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("serial").join(SCORED_RUNS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + plan.run_count(&corpus));

        plan.out_dir = dir.path().join("par");
        plan.parallelism = 4;
        let par = run_benchmark(&plan, &corpus, &env(), &BenchOptions::default()).unwrap();
        assert_eq!(par.runs, serial.runs);

        plan.out_dir = dir.path().join("resume");
        plan.parallelism = 1;
        let cut = BenchOptions {
            interrupt_after_steps: Some(37),
        };
        assert!(matches!(run_benchmark(&plan, &corpus, &env(), &cut), Err(BenchError::Interrupted(_))));
        assert!(!plan.out_dir.join(SCORED_RUNS_FILE).exists());
        let resumed = run_benchmark(&plan, &corpus, &env(), &BenchOptions::default()).unwrap();
        assert_eq!(resumed.runs, serial.runs);
        assert_eq!(
            std::fs::read_to_string(plan.out_dir.join(SCORED_RUNS_FILE)).unwrap(),
            csv
        );
    }
}
