//! Trace events, the JSONL trace sink, checkpoints and the pairing linter.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RunState, Turn, TurnKind};
use crate::recovery::Policy;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Generated,
    Executed,
    FailureExtracted,
    RulePatched,
    ModelRepaired,
    ContextEnriched,
    Escalated,
    Stopped,
    /// A model reasoning turn; opens a ReAct iteration.
    Thought,
    ToolCalled,
    ToolReturned,
    /// Batch-mode auto-acknowledged confirmation.
    ConfirmationRequested,
    /// The orchestrator overrode a model stop request.
    ForcedRetry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub run_id: String,
    pub case_id: u32,
    pub strategy: Policy,
    pub seed: u64,
    pub seq: u64,
    pub event: EventKind,
    pub payload: serde_json::Value,
    /// Milliseconds since the Unix epoch.
    pub wall_time: u64,
}

/// Source of `wall_time` values. `Fixed` makes traces byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(u64),
}

impl Clock {
    pub fn now_ms(self) -> u64 {
        match self {
            Clock::Fixed(t) => t,
            Clock::System => system_ms(),
        }
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn system_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[cfg(target_arch = "wasm32")]
fn system_ms() -> u64 {
    0
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Append-only JSONL writer for one case-run.
pub struct JsonlSink {
    path: PathBuf,
    file: File,
}

impl JsonlSink {
    /// Opens `path` and writes `existing` as its full contents.
    pub fn create(path: &Path, existing: &[TraceEvent]) -> Result<Self, TraceError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = File::create(path).map_err(io_err(path))?;
        for ev in existing {
            writeln!(file, "{}", event_line(ev)).map_err(io_err(path))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, ev: &TraceEvent) -> Result<(), TraceError> {
        writeln!(self.file, "{}", event_line(ev)).map_err(io_err(&self.path))?;
        if ev.event == EventKind::Stopped {
            self.file.sync_all().map_err(io_err(&self.path))?;
        }
        Ok(())
    }
}

fn event_line(ev: &TraceEvent) -> String {
    serde_json::to_string(ev).expect("trace events serialize")
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn trace_to_jsonl(events: &[TraceEvent]) -> String {
    events.iter().map(|e| event_line(e) + "\n").collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    state: RunState,
}

/// Writes the checkpoint atomically (temp file plus rename).
pub fn checkpoint_save(state: &RunState, path: &Path) -> Result<(), TraceError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let body = serde_json::to_vec(&CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        state: state.clone(),
    })
    .expect("run state serializes");
    let tmp = path.with_extension("json.tmp");
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&tmp)
        .map_err(io_err(&tmp))?;
    f.write_all(&body).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn checkpoint_resume(path: &Path) -> Result<RunState, TraceError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| TraceError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(corrupt(format!("schema version {}", file.schema_version)));
    }
    let s = &file.state;
    if s.events.iter().zip(1..).any(|(e, n)| e.seq != n) {
        return Err(corrupt("event sequence has gaps".into()));
    }
    Ok(file.state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingViolation {
    /// Index of the offending turn or event.
    pub at: usize,
    pub reason: String,
}

#[derive(Default)]
struct PairingTracker {
    pending: Option<u64>,
    violations: Vec<PairingViolation>,
}

impl PairingTracker {
    fn thought(&mut self, at: usize) {
        if let Some(id) = self.pending {
            self.fail(at, format!("model turn before result of call {id}"));
        }
    }

    fn call(&mut self, at: usize, id: Option<u64>) {
        let Some(id) = id else {
            return self.fail(at, "tool call without id".into());
        };
        if let Some(open) = self.pending {
            self.fail(at, format!("call {id} issued while call {open} is open"));
        }
        self.pending = Some(id);
    }

    fn result(&mut self, at: usize, id: Option<u64>) {
        match (self.pending.take(), id) {
            (Some(open), Some(id)) if open == id => {}
            (Some(open), id) => self.fail(at, format!("result {id:?} does not match open call {open}")),
            (None, id) => self.fail(at, format!("result {id:?} without an open call")),
        }
    }

    fn fail(&mut self, at: usize, reason: String) {
        self.violations.push(PairingViolation { at, reason });
    }
}

/// Checks the message pairing invariant over a conversation prefix.
pub fn lint_conversation(turns: &[Turn]) -> Vec<PairingViolation> {
    let mut t = PairingTracker::default();
    for (i, turn) in turns.iter().enumerate() {
        match turn.kind {
            TurnKind::ModelThought => t.thought(i),
            TurnKind::ToolCall => t.call(i, turn.call_id),
            TurnKind::ToolResult => t.result(i, turn.call_id),
            TurnKind::System | TurnKind::User => {}
        }
    }
    t.violations
}

fn call_id_of(ev: &TraceEvent) -> Option<u64> {
    ev.payload.get("call_id").and_then(|v| v.as_u64())
}

/// Independent trace linter: pairing over stored events, strictly increasing
/// `seq`, a single terminal `Stopped` event, and no open call at the end.
pub fn lint_trace(events: &[TraceEvent]) -> Vec<PairingViolation> {
    let mut t = PairingTracker::default();
    let mut last_seq = 0;
    for (i, ev) in events.iter().enumerate() {
        if ev.seq <= last_seq {
            t.fail(i, format!("seq {} not increasing", ev.seq));
        }
        last_seq = ev.seq;
        match ev.event {
            EventKind::Thought => t.thought(i),
            EventKind::ToolCalled => t.call(i, call_id_of(ev)),
            EventKind::ToolReturned => t.result(i, call_id_of(ev)),
            EventKind::Stopped if i + 1 != events.len() => t.fail(i, "events after Stopped".into()),
            _ => {}
        }
    }
    match events.last() {
        Some(ev) if ev.event == EventKind::Stopped => {
            if let Some(id) = t.pending {
                t.fail(events.len() - 1, format!("call {id} never answered"));
            }
        }
        _ => t.fail(events.len(), "trace has no Stopped event".into()),
    }
    t.violations
}

pub fn count_events(events: &[TraceEvent], kind: EventKind) -> usize {
    events.iter().filter(|e| e.event == kind).count()
}
