//! Local routing service: a module registry in front of the benchmark runner.
//!
//! Submissions are queued on blocking worker tasks, bounded by a semaphore.
//! Run state lives in memory for the lifetime of the process.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use apdl_harness::bench::{categories, execute_job, run_id, run_seed, BenchEnv, Job};
use apdl_harness::corpus::Corpus;
use apdl_harness::orchestrator::trace::trace_to_jsonl;
use apdl_harness::orchestrator::CaseRunRecord;
use apdl_harness::recovery::Policy;
use apdl_harness::scoring::report::build_report;
use apdl_harness::scoring::ScoredRun;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub const MAPDL_MODULE: &str = "mapdl";

/// Maps module keys to the corpus their sub-agent serves.
#[derive(Clone, Default)]
pub struct ModuleRegistry {
    modules: BTreeMap<String, Arc<Corpus>>,
}

impl ModuleRegistry {
    pub fn with_mapdl(corpus: Corpus) -> Self {
        let mut r = Self::default();
        r.register(MAPDL_MODULE, corpus);
        r
    }

    pub fn register(&mut self, key: &str, corpus: Corpus) {
        self.modules.insert(key.to_string(), Arc::new(corpus));
    }

    pub fn get(&self, key: &str) -> Option<Arc<Corpus>> {
        self.modules.get(key).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Queued,
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub run_id: String,
    pub module: String,
    pub status: RunPhase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<CaseRunRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoredRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    trace: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    registry: ModuleRegistry,
    env: BenchEnv,
    runs: Arc<Mutex<BTreeMap<String, RunEntry>>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(registry: ModuleRegistry, env: BenchEnv, workers: usize) -> Self {
        Self {
            registry,
            env,
            runs: Arc::default(),
            permits: Arc::new(Semaphore::new(workers.max(1))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SingleRun {
    case_id: u32,
    strategy: String,
    #[serde(default)]
    repeat: u32,
    #[serde(default = "default_seed")]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanRun {
    strategies: Vec<String>,
    #[serde(default = "default_repeats")]
    repeats: u32,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    case_ids: Option<Vec<u32>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Submission {
    Single(SingleRun),
    Plan(PlanRun),
}

fn default_seed() -> u64 {
    42
}

fn default_repeats() -> u32 {
    3
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/modules/{key}/runs", post(submit))
        .route("/v1/runs/{id}", get(run_status))
        .route("/v1/runs/{id}/trace", get(run_trace))
        .route("/v1/reports/summary", get(summary))
        .with_state(state)
}

fn parse_policy(name: &str) -> Result<Policy, ApiError> {
    name.parse().map_err(|e: apdl_harness::recovery::UnknownPolicy| ApiError::bad_request(e.to_string()))
}

fn expand(sub: Submission, corpus: &Corpus) -> Result<(Vec<Job>, u64), ApiError> {
    match sub {
        Submission::Single(s) => {
            if corpus.task(s.case_id).is_none() {
                return Err(ApiError::bad_request(format!("unknown case_id {}", s.case_id)));
            }
            let job = Job {
                case_id: s.case_id,
                strategy: parse_policy(&s.strategy)?,
                repeat: s.repeat,
            };
            Ok((vec![job], s.seed))
        }
        Submission::Plan(p) => {
            if p.strategies.is_empty() || p.repeats == 0 {
                return Err(ApiError::bad_request("plan needs strategies and at least one repeat"));
            }
            let strategies = p.strategies.iter().map(|s| parse_policy(s)).collect::<Result<Vec<_>, _>>()?;
            let case_ids = match p.case_ids {
                Some(ids) => {
                    if let Some(bad) = ids.iter().find(|id| corpus.task(**id).is_none()) {
                        return Err(ApiError::bad_request(format!("unknown case_id {bad}")));
                    }
                    ids
                }
                None => corpus.tasks.iter().map(|t| t.case_id).collect(),
            };
            let mut jobs = Vec::new();
            for case_id in case_ids {
                for &strategy in &strategies {
                    for repeat in 0..p.repeats {
                        jobs.push(Job { case_id, strategy, repeat });
                    }
                }
            }
            Ok((jobs, p.seed))
        }
    }
}

async fn submit(
    State(state): State<AppState>,
    Path(key): Path<String>,
    body: Result<Json<Value>, JsonRejection>,
) -> Result<Response, ApiError> {
    let corpus = state
        .registry
        .get(&key)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "MODULE_NOT_FOUND", format!("no module `{key}`")))?;
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let sub: Submission = serde_json::from_value(body).map_err(|e| ApiError::bad_request(format!("malformed submission: {e}")))?;
    let (jobs, base_seed) = expand(sub, &corpus)?;

    let ids: Vec<String> = jobs
        .iter()
        .map(|j| run_id(j.case_id, j.strategy, j.repeat, run_seed(base_seed, j.case_id, j.repeat)))
        .collect();
    {
        let mut runs = state.runs.lock().expect("runs lock");
        if let Some(dup) = ids.iter().find(|id| runs.contains_key(*id)) {
            return Err(ApiError::new(StatusCode::CONFLICT, "DUPLICATE_RUN", format!("run {dup} already submitted")));
        }
        for id in &ids {
            runs.insert(
                id.clone(),
                RunEntry {
                    run_id: id.clone(),
                    module: key.clone(),
                    status: RunPhase::Queued,
                    record: None,
                    scores: None,
                    error: None,
                    trace: None,
                },
            );
        }
    }

    for (job, id) in jobs.into_iter().zip(ids.iter().cloned()) {
        let state = state.clone();
        let corpus = corpus.clone();
        tokio::spawn(async move {
            let _permit = state.permits.clone().acquire_owned().await.expect("semaphore open");
            set_phase(&state, &id, RunPhase::Running);
            let env = state.env.clone();
            let result = tokio::task::spawn_blocking(move || {
                let task = corpus.task(job.case_id).expect("validated on submit");
                execute_job(job, task, base_seed, &env, None, &mut |_| false)
            })
            .await;
            let mut runs = state.runs.lock().expect("runs lock");
            let entry = runs.get_mut(&id).expect("entry inserted on submit");
            match result {
                Ok(Ok(r)) => {
                    entry.status = RunPhase::Finished;
                    entry.trace = Some(trace_to_jsonl(&r.output.events));
                    entry.record = Some(r.output.record);
                    entry.scores = Some(r.scored);
                }
                Ok(Err(e)) => {
                    entry.status = RunPhase::Failed;
                    entry.error = Some(e.to_string());
                }
                Err(e) => {
                    entry.status = RunPhase::Failed;
                    entry.error = Some(format!("worker panicked: {e}"));
                }
            }
        });
    }

    let body = if ids.len() == 1 {
        json!({"run_id": ids[0], "status": "queued"})
    } else {
        json!({"run_ids": ids, "status": "queued"})
    };
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

fn set_phase(state: &AppState, id: &str, phase: RunPhase) {
    if let Some(e) = state.runs.lock().expect("runs lock").get_mut(id) {
        e.status = phase;
    }
}

fn run_not_found(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "RUN_NOT_FOUND", format!("no run `{id}`"))
}

async fn run_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunEntry>, ApiError> {
    let runs = state.runs.lock().expect("runs lock");
    runs.get(&id).cloned().map(Json).ok_or_else(|| run_not_found(&id))
}

async fn run_trace(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let runs = state.runs.lock().expect("runs lock");
    let entry = runs.get(&id).ok_or_else(|| run_not_found(&id))?;
    let trace = entry
        .trace
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "RUN_NOT_FINISHED", format!("run `{id}` has no trace yet")))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], trace).into_response())
}

async fn summary(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let (scored, modules): (Vec<ScoredRun>, Vec<String>) = {
        let runs = state.runs.lock().expect("runs lock");
        runs.values()
            .filter_map(|e| e.scores.map(|s| (s, e.module.clone())))
            .unzip()
    };
    if scored.is_empty() {
        return Ok(Json(json!({})));
    }
    let mut cats = BTreeMap::new();
    for m in modules.iter().collect::<std::collections::BTreeSet<_>>() {
        if let Some(c) = state.registry.get(m) {
            cats.extend(categories(&c));
        }
    }
    let report = build_report(&scored, &cats)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "REPORT_FAILED", e.to_string()))?;
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

pub async fn serve(port: u16, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    axum::serve(listener, router(state)).await
}
