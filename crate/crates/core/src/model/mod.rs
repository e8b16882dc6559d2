//! Generation and repair clients.
//!
//! The orchestrator talks to models only through [`ModelClient`]. Benchmarks
//! use [`ScriptedModel`]; the HTTP gateway client (feature `gateway`) wraps an
//! external completion endpoint, and [`EscalatingClient`] chains a local
//! first-pass client to a stronger one.

mod scripted;
#[cfg(feature = "gateway")]
pub mod gateway;

pub use scripted::{clean_script, initial_script, CompetenceTable, ScriptedModel};

use thiserror::Error;

use crate::apdl::{parse_script, ApdlScript, FailureSignature};
use crate::corpus::TaskSpec;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("model output is not a valid APDL script: {0}")]
    Unparseable(String),
    #[error("model backend unavailable: {0}")]
    Unavailable(String),
}

/// Everything a repair call may look at.
#[derive(Debug, Clone, Copy)]
pub struct RepairRequest<'a> {
    pub script: &'a ApdlScript,
    pub sig: &'a FailureSignature,
    pub task: &'a TaskSpec,
    /// Extra context supplied by the context-enrichment ladder level.
    pub enrichment: Option<&'a str>,
    /// Number of the failed execution attempt being repaired.
    pub attempt: u32,
    pub seed: u64,
}

pub trait ModelClient: Send + Sync {
    fn name(&self) -> &str;

    fn generate_initial(&self, task: &TaskSpec, seed: u64) -> Result<ApdlScript, ModelError>;

    fn repair(&self, req: &RepairRequest<'_>) -> Result<ApdlScript, ModelError>;

    /// Whether the model tries to end the episode after seeing failed
    /// attempt `attempt`. The orchestrator may override this.
    fn requests_stop_after_failure(&self, _task: &TaskSpec, _attempt: u32, _seed: u64) -> bool {
        false
    }
}

/// Parses raw completion text, accepting an optional fenced code block.
pub fn script_from_completion(text: &str) -> Result<ApdlScript, ModelError> {
    let body = match text.find("```") {
        Some(start) => {
            let rest = &text[start + 3..];
            let rest = rest.split_once('\n').map_or("", |(_, r)| r);
            rest.split("```").next().unwrap_or("")
        }
        None => text,
    };
    let script = parse_script(body).map_err(|e| ModelError::Unparseable(e.to_string()))?;
    if script.is_empty() {
        return Err(ModelError::Unparseable("completion contains no commands".into()));
    }
    Ok(script)
}

/// Local-then-external escalation: the second client is only called when
/// the first one fails to produce a usable script.
pub struct EscalatingClient<A, B> {
    pub local: A,
    pub external: B,
    name: String,
}

impl<A: ModelClient, B: ModelClient> EscalatingClient<A, B> {
    pub fn new(local: A, external: B) -> Self {
        let name = format!("{}+{}", local.name(), external.name());
        Self { local, external, name }
    }
}

impl<A: ModelClient, B: ModelClient> ModelClient for EscalatingClient<A, B> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate_initial(&self, task: &TaskSpec, seed: u64) -> Result<ApdlScript, ModelError> {
        self.local
            .generate_initial(task, seed)
            .or_else(|_| self.external.generate_initial(task, seed))
    }

    fn repair(&self, req: &RepairRequest<'_>) -> Result<ApdlScript, ModelError> {
        self.local.repair(req).or_else(|_| self.external.repair(req))
    }

    fn requests_stop_after_failure(&self, task: &TaskSpec, attempt: u32, seed: u64) -> bool {
        self.local.requests_stop_after_failure(task, attempt, seed)
    }
}
