//! The harness core.
//!
//! A case-run is a resumable phase machine over [`RunState`]: generate the
//! first script, execute it, and on failure extract the signature and
//! dispatch on the strategy's recovery policy until the run succeeds, fails
//! or escalates. The orchestrator, not the model, owns the retry budget,
//! the ReAct iteration cap and the stop decision. Every step appends trace
//! events and may checkpoint the whole state.

pub mod context;
pub mod tools;
pub mod trace;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::apdl::{extract_failure, render_script, ApdlScript, ExitStatus, FailureSignature, SolverLog};
use crate::corpus::TaskSpec;
use crate::model::{ModelClient, RepairRequest};
use crate::recovery::{ladder_next, LadderLevel, Policy, StrategyConfig};
use crate::solver::{ExecContext, SimOutcome, SolverBackend};

use context::{estimate_tokens, manage_context, BudgetInfeasible, DEFAULT_TOKEN_BUDGET};
use tools::{tool_dispatch, ToolCall, ToolEnv, ToolResult, ToolStatus, PATCH_SCRIPT, READ_ERROR_LOG, RUN_SOLVER};
use trace::{checkpoint_save, lint_conversation, Clock, EventKind, JsonlSink, TraceError, TraceEvent};

const SYSTEM_PROMPT: &str = "You write and repair MAPDL APDL input scripts. Tools: run_solver executes a \
script, read_error_log returns the log of the last failed run. Reply with complete scripts only.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnKind {
    System,
    User,
    ModelThought,
    ToolCall,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub kind: TurnKind,
    pub payload: String,
    pub token_estimate: usize,
    /// Links a ToolCall to its ToolResult.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<u64>,
    #[serde(default)]
    pub collapsed: bool,
}

impl Turn {
    pub fn new(kind: TurnKind, payload: String, call_id: Option<u64>) -> Self {
        Self {
            kind,
            token_estimate: estimate_tokens(&payload),
            payload,
            call_id,
            collapsed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
    Escalated,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        self != RunStatus::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Generate,
    Execute,
    Diagnose,
    Recover(LadderLevel),
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRunRecord {
    pub case_id: u32,
    pub strategy: Policy,
    pub repeat_index: u32,
    pub completed: u8,
    pub retries: u32,
    pub intervention_required: bool,
    pub images: usize,
    pub trace_ref: String,
    pub token_estimate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub case_id: u32,
    pub strategy: StrategyConfig,
    pub repeat_index: u32,
    pub seed: u64,
    pub trace_ref: String,
    pub attempt: u32,
    pub react_iter: u32,
    pub conversation: Vec<Turn>,
    pub last_outcome: Option<SimOutcome>,
    pub ladder_pos: Option<LadderLevel>,
    pub status: RunStatus,
    pub phase: Phase,
    /// Current script G_t.
    pub script: Option<ApdlScript>,
    pub last_sig: Option<FailureSignature>,
    pub forced_used: u32,
    pub enrichment: Option<String>,
    pub next_call_id: u64,
    /// Sum of estimates over every turn ever appended.
    pub token_total: usize,
    pub token_budget: usize,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("internal invariant violated in run {run_id}: {detail}")]
    InternalInvariantViolation { run_id: String, detail: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("run {0} interrupted")]
    Interrupted(String),
}

/// Identity of one case-run within a benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub run_id: String,
    pub repeat_index: u32,
    /// Trace location as recorded in the [`CaseRunRecord`].
    pub trace_ref: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub trace_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub artifact_dir: Option<PathBuf>,
    pub clock: Clock,
    /// Defaults to [`DEFAULT_TOKEN_BUDGET`] when zero.
    pub token_budget: usize,
}

pub struct Collaborators<'a> {
    pub model: &'a dyn ModelClient,
    pub backend: &'a dyn SolverBackend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub record: CaseRunRecord,
    pub events: Vec<TraceEvent>,
}

impl RunState {
    pub fn new(task: &TaskSpec, strategy: StrategyConfig, seed: u64, id: RunIdentity, token_budget: usize) -> Self {
        let token_budget = if token_budget == 0 { DEFAULT_TOKEN_BUDGET } else { token_budget };
        let conversation = vec![
            Turn::new(TurnKind::System, SYSTEM_PROMPT.to_string(), None),
            Turn::new(TurnKind::User, task.prompt.clone(), None),
        ];
        Self {
            run_id: id.run_id,
            case_id: task.case_id,
            strategy,
            repeat_index: id.repeat_index,
            seed,
            trace_ref: id.trace_ref,
            attempt: 0,
            react_iter: 0,
            token_total: conversation.iter().map(|t| t.token_estimate).sum(),
            conversation,
            last_outcome: None,
            ladder_pos: None,
            status: RunStatus::Running,
            phase: Phase::Generate,
            script: None,
            last_sig: None,
            forced_used: 0,
            enrichment: None,
            next_call_id: 1,
            token_budget,
            events: Vec::new(),
        }
    }

    pub fn images(&self) -> usize {
        match (&self.status, &self.last_outcome) {
            (RunStatus::Succeeded, Some(o)) => o.images.len(),
            _ => 0,
        }
    }

    pub fn record(&self) -> CaseRunRecord {
        let images = self.images();
        CaseRunRecord {
            case_id: self.case_id,
            strategy: self.strategy.policy,
            repeat_index: self.repeat_index,
            completed: u8::from(images >= 1),
            retries: self.attempt.saturating_sub(1),
            intervention_required: matches!(self.status, RunStatus::Failed | RunStatus::Escalated),
            images,
            trace_ref: self.trace_ref.clone(),
            token_estimate: self.token_total,
        }
    }
}

/// Runs one case from scratch.
pub fn run_case(
    task: &TaskSpec,
    strategy: StrategyConfig,
    collab: &Collaborators<'_>,
    seed: u64,
    id: RunIdentity,
    opts: &RunOptions,
) -> Result<RunOutput, OrchestratorError> {
    let state = RunState::new(task, strategy, seed, id, opts.token_budget);
    drive(state, task, collab, opts, &mut |_| false)
}

/// Advances `state` to a terminal status. `interrupt` is consulted after
/// every checkpointed step; returning true stops with
/// [`OrchestratorError::Interrupted`], leaving a resumable checkpoint.
pub fn drive(
    mut state: RunState,
    task: &TaskSpec,
    collab: &Collaborators<'_>,
    opts: &RunOptions,
    interrupt: &mut dyn FnMut(&RunState) -> bool,
) -> Result<RunOutput, OrchestratorError> {
    if state.phase == Phase::Done {
        return Ok(RunOutput {
            record: state.record(),
            events: state.events,
        });
    }
    let sink = match &opts.trace_path {
        Some(p) => Some(JsonlSink::create(p, &state.events)?),
        None => None,
    };
    let mut run = Runner {
        task,
        collab,
        opts,
        sink,
    };
    while state.phase != Phase::Done {
        run.step(&mut state)?;
        run.check(&state)?;
        if let Some(p) = &opts.checkpoint_path {
            checkpoint_save(&state, p)?;
        }
        if state.phase != Phase::Done && interrupt(&state) {
            return Err(OrchestratorError::Interrupted(state.run_id));
        }
    }
    Ok(RunOutput {
        record: state.record(),
        events: state.events,
    })
}

struct Runner<'a, 'c> {
    task: &'a TaskSpec,
    collab: &'a Collaborators<'c>,
    opts: &'a RunOptions,
    sink: Option<JsonlSink>,
}

fn violation(state: &RunState, detail: impl Into<String>) -> OrchestratorError {
    OrchestratorError::InternalInvariantViolation {
        run_id: state.run_id.clone(),
        detail: detail.into(),
    }
}

/// ReAct iterations the next recovery round needs at `level`.
fn iterations_needed(level: LadderLevel) -> u32 {
    match level {
        LadderLevel::L1RulePatch => 1,
        LadderLevel::L2ModelRegen | LadderLevel::L3ContextEnrich => 2,
        LadderLevel::L4Human => 0,
    }
}

fn enrichment_for(task: &TaskSpec, sig: &FailureSignature) -> String {
    format!(
        "Analysis type: {}. Valid element types: {}. Nominal element size: {} mm. \
         Last failure: {} ({}).",
        task.category,
        task.category.compatible_elements().join(", "),
        task.geometry.mesh_size_mm,
        sig.class,
        sig.message
    )
}

impl Runner<'_, '_> {
    fn emit(&mut self, state: &mut RunState, event: EventKind, payload: Value) -> Result<(), OrchestratorError> {
        let ev = TraceEvent {
            run_id: state.run_id.clone(),
            case_id: state.case_id,
            strategy: state.strategy.policy,
            seed: state.seed,
            seq: state.events.len() as u64 + 1,
            event,
            payload,
            wall_time: self.opts.clock.now_ms(),
        };
        if let Some(sink) = &mut self.sink {
            sink.append(&ev)?;
        }
        state.events.push(ev);
        Ok(())
    }

    fn push_turn(&mut self, state: &mut RunState, turn: Turn) -> Result<(), OrchestratorError> {
        state.token_total += turn.token_estimate;
        let mut conv = std::mem::take(&mut state.conversation);
        conv.push(turn);
        state.conversation = manage_context(conv, state.token_budget).map_err(|e: BudgetInfeasible| violation(state, e.to_string()))?;
        Ok(())
    }

    /// Opens a ReAct iteration with a model turn.
    fn think(&mut self, state: &mut RunState, text: String) -> Result<(), OrchestratorError> {
        if state.react_iter >= state.strategy.max_react_iters {
            return Err(violation(state, "ReAct iteration cap exceeded"));
        }
        state.react_iter += 1;
        self.emit(state, EventKind::Thought, json!({ "iteration": state.react_iter, "text": text }))?;
        self.push_turn(state, Turn::new(TurnKind::ModelThought, text, None))
    }

    fn call_tool(&mut self, state: &mut RunState, tool: &str, args: Value) -> Result<ToolResult, OrchestratorError> {
        let call = ToolCall {
            call_id: state.next_call_id,
            tool: tool.to_string(),
            args,
        };
        state.next_call_id += 1;
        self.emit(
            state,
            EventKind::ToolCalled,
            json!({ "call_id": call.call_id, "tool": call.tool, "args": call.args }),
        )?;
        let call_text = serde_json::to_string(&call).expect("tool calls serialize");
        self.push_turn(state, Turn::new(TurnKind::ToolCall, call_text, Some(call.call_id)))?;

        let last_log = state.last_outcome.as_ref().filter(|o| !o.success).map(|o| &o.log);
        let env = ToolEnv {
            task: self.task,
            backend: self.collab.backend,
            exec: ExecContext {
                attempt: state.attempt + 1,
                artifact_dir: self.opts.artifact_dir.clone(),
            },
            last_log,
        };
        let result = tool_dispatch(&call, &state.strategy, &env).map_err(|e| violation(state, e.to_string()))?;
        self.emit(
            state,
            EventKind::ToolReturned,
            json!({ "call_id": result.call_id, "tool": result.tool, "status": result.status, "output": result.output }),
        )?;
        let result_text = serde_json::to_string(&result.output).expect("tool output serializes");
        self.push_turn(state, Turn::new(TurnKind::ToolResult, result_text, Some(result.call_id)))?;
        Ok(result)
    }

    fn stop(&mut self, state: &mut RunState, status: RunStatus, reason: &str) -> Result<(), OrchestratorError> {
        state.status = status;
        state.phase = Phase::Done;
        let payload = json!({
            "status": status,
            "reason": reason,
            "attempt": state.attempt,
            "react_iter": state.react_iter,
            "images": state.images(),
            "intervention_required": matches!(status, RunStatus::Failed | RunStatus::Escalated),
        });
        self.emit(state, EventKind::Stopped, payload)
    }

    fn check(&self, state: &RunState) -> Result<(), OrchestratorError> {
        if state.attempt > state.strategy.budget_b {
            return Err(violation(state, format!("attempt {} exceeds budget", state.attempt)));
        }
        if state.react_iter > state.strategy.max_react_iters {
            return Err(violation(state, "ReAct iteration cap exceeded"));
        }
        if let Some(v) = lint_conversation(&state.conversation).first() {
            return Err(violation(state, format!("pairing: {}", v.reason)));
        }
        if state.status == RunStatus::Succeeded && state.images() == 0 {
            return Err(violation(state, "success without images"));
        }
        Ok(())
    }

    fn step(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        match state.phase {
            Phase::Generate => self.generate(state),
            Phase::Execute => self.execute(state),
            Phase::Diagnose => self.diagnose(state),
            Phase::Recover(LadderLevel::L1RulePatch) => self.rule_patch(state),
            Phase::Recover(LadderLevel::L3ContextEnrich) => {
                let sig = state.last_sig.clone().unwrap_or_else(|| FailureSignature::unknown(""));
                let text = enrichment_for(self.task, &sig);
                self.emit(state, EventKind::ContextEnriched, json!({ "context": text }))?;
                self.push_turn(state, Turn::new(TurnKind::User, text.clone(), None))?;
                state.enrichment = Some(text);
                self.model_repair(state)
            }
            Phase::Recover(LadderLevel::L2ModelRegen) => self.model_repair(state),
            Phase::Recover(LadderLevel::L4Human) => Err(violation(state, "L4 is terminal")),
            Phase::Done => Ok(()),
        }
    }

    fn generate(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        match self.collab.model.generate_initial(self.task, state.seed) {
            Ok(script) => {
                let text = render_script(&script);
                self.think(state, text.clone())?;
                self.emit(
                    state,
                    EventKind::Generated,
                    json!({ "model": self.collab.model.name(), "commands": script.len(), "script": text }),
                )?;
                state.script = Some(script);
                state.phase = Phase::Execute;
                Ok(())
            }
            Err(e) => {
                self.think(state, format!("generation failed: {e}"))?;
                self.emit(state, EventKind::Generated, json!({ "model": self.collab.model.name(), "error": e.to_string() }))?;
                self.stop(state, RunStatus::Failed, "generation_failed")
            }
        }
    }

    fn execute(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        if state.attempt >= state.strategy.budget_b {
            return Err(violation(state, "execution requested with budget exhausted"));
        }
        if state.strategy.execution_confirmation_required {
            self.emit(
                state,
                EventKind::ConfirmationRequested,
                json!({ "reason": "execution", "attempt": state.attempt + 1, "auto_acknowledged": true }),
            )?;
        }
        let script_text = render_script(state.script.as_ref().expect("script exists after generation"));
        self.think(state, format!("Execute attempt {}.", state.attempt + 1))?;
        let result = self.call_tool(state, RUN_SOLVER, json!({ "script": script_text }))?;
        state.attempt += 1;
        let outcome = match result.status {
            ToolStatus::Ok => serde_json::from_value::<SimOutcome>(result.output["outcome"].clone())
                .map_err(|e| violation(state, format!("solver output: {e}")))?,
            _ => {
                let message = result.output["error"].as_str().unwrap_or("solver error").to_string();
                SimOutcome {
                    success: false,
                    images: Vec::new(),
                    log: SolverLog {
                        lines: vec![format!("{}{message}", crate::apdl::ERROR_SENTINEL)],
                        exit_status: ExitStatus::Failure,
                    },
                    solve_steps: 0,
                }
            }
        };
        let success = outcome.success && !outcome.images.is_empty();
        self.emit(
            state,
            EventKind::Executed,
            json!({
                "attempt": state.attempt,
                "backend": self.collab.backend.backend_id(),
                "success": success,
                "images": outcome.images,
            }),
        )?;
        state.last_outcome = Some(outcome);
        if success {
            self.stop(state, RunStatus::Succeeded, "solution_complete")
        } else {
            state.phase = Phase::Diagnose;
            Ok(())
        }
    }

    fn diagnose(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        let log = &state.last_outcome.as_ref().expect("diagnose follows execution").log;
        let sig = extract_failure(log).unwrap_or_else(|e| FailureSignature::unknown(e.to_string()));
        self.emit(
            state,
            EventKind::FailureExtracted,
            json!({ "class": sig.class, "message": sig.message, "command_ref": sig.command_ref }),
        )?;
        state.last_sig = Some(sig.clone());

        let cfg = state.strategy;
        if cfg.policy == Policy::NoRecovery {
            return self.stop(state, RunStatus::Failed, "no_recovery");
        }
        if state.attempt >= cfg.budget_b {
            return self.stop(state, RunStatus::Failed, "budget_exhausted");
        }
        let Some(level) = ladder_next(state.ladder_pos, &sig, &cfg) else {
            return self.stop(state, RunStatus::Failed, "ladder_exhausted");
        };
        if level == LadderLevel::L4Human {
            state.ladder_pos = Some(level);
            self.emit(state, EventKind::Escalated, json!({ "level": level, "class": sig.class }))?;
            return self.stop(state, RunStatus::Escalated, "escalated_to_human");
        }
        let wants_stop = cfg.policy == Policy::ModelOnly
            && self
                .collab
                .model
                .requests_stop_after_failure(self.task, state.attempt, state.seed);
        let needed = iterations_needed(level) + u32::from(wants_stop);
        if state.react_iter + needed > cfg.max_react_iters {
            return self.stop(state, RunStatus::Failed, "iteration_cap");
        }
        if wants_stop {
            self.think(state, format!("Attempt {} failed; stopping here.", state.attempt))?;
            if state.forced_used >= cfg.forced_retries {
                return self.stop(state, RunStatus::Failed, "model_stopped");
            }
            state.forced_used += 1;
            self.emit(
                state,
                EventKind::ForcedRetry,
                json!({ "forced_round": state.forced_used, "remaining": cfg.forced_retries - state.forced_used }),
            )?;
        }
        state.ladder_pos = Some(level);
        state.phase = Phase::Recover(level);
        Ok(())
    }

    fn rule_patch(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        let sig = state.last_sig.clone().expect("signature extracted before patching");
        if state.strategy.rule_confirmation_required {
            self.emit(
                state,
                EventKind::ConfirmationRequested,
                json!({ "reason": "rule_patch", "class": sig.class, "auto_acknowledged": true }),
            )?;
        }
        let script_text = render_script(state.script.as_ref().expect("script exists"));
        let result = self.call_tool(state, PATCH_SCRIPT, json!({ "script": script_text, "signature": sig }))?;
        if result.status != ToolStatus::Ok {
            return Err(violation(state, "patch_script denied under a rule-patching policy"));
        }
        let patched = crate::apdl::parse_script(result.output["script"].as_str().unwrap_or(""))
            .map_err(|e| violation(state, format!("patched script: {e}")))?;
        self.emit(
            state,
            EventKind::RulePatched,
            json!({ "rules": result.output["rules_applied"], "changed": result.output["changed"] }),
        )?;
        state.script = Some(patched);
        state.phase = Phase::Execute;
        Ok(())
    }

    fn model_repair(&mut self, state: &mut RunState) -> Result<(), OrchestratorError> {
        self.think(state, format!("Read the error log of attempt {} and repair the script.", state.attempt))?;
        let result = self.call_tool(state, READ_ERROR_LOG, json!({}))?;
        let sig = match (result.status, result.output["log"].as_str()) {
            (ToolStatus::Ok, Some(text)) => {
                let log = SolverLog {
                    lines: text.lines().map(str::to_string).collect(),
                    exit_status: ExitStatus::Failure,
                };
                extract_failure(&log).unwrap_or_else(|e| FailureSignature::unknown(e.to_string()))
            }
            _ => FailureSignature::unknown("error log unavailable"),
        };
        let script = state.script.clone().expect("script exists");
        let req = RepairRequest {
            script: &script,
            sig: &sig,
            task: self.task,
            enrichment: state.enrichment.as_deref(),
            attempt: state.attempt,
            seed: state.seed,
        };
        let payload = match self.collab.model.repair(&req) {
            Ok(repaired) => {
                let changed = !repaired.same_commands(&script);
                state.script = Some(repaired);
                json!({ "model": self.collab.model.name(), "class": sig.class, "changed": changed })
            }
            Err(e) => json!({ "model": self.collab.model.name(), "class": sig.class, "changed": false, "error": e.to_string() }),
        };
        self.emit(state, EventKind::ModelRepaired, payload)?;
        state.phase = Phase::Execute;
        Ok(())
    }
}
