//! Tool pipeline: validate, permit, execute.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::apdl::{parse_script, render_script, FailureSignature, SolverLog};
use crate::corpus::TaskSpec;
use crate::recovery::{rule_patch, LadderLevel, StrategyConfig};
use crate::solver::{ExecContext, SolverBackend};

pub const READ_ERROR_LOG: &str = "read_error_log";
pub const RUN_SOLVER: &str = "run_solver";
pub const PATCH_SCRIPT: &str = "patch_script";

pub const TOOLS: [&str; 3] = [READ_ERROR_LOG, RUN_SOLVER, PATCH_SCRIPT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: u64,
    pub tool: String,
    pub args: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    PermissionDenied,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: u64,
    pub tool: String,
    pub status: ToolStatus,
    pub output: Value,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("arguments for `{tool}` violate its schema: {reason}")]
    SchemaViolation { tool: String, reason: String },
}

/// What tools can reach during one dispatch.
pub struct ToolEnv<'a> {
    pub task: &'a TaskSpec,
    pub backend: &'a dyn SolverBackend,
    pub exec: ExecContext,
    /// Log of the most recent failed execution, if any.
    pub last_log: Option<&'a SolverLog>,
}

fn schema(tool: &str, reason: impl Into<String>) -> ToolError {
    ToolError::SchemaViolation {
        tool: tool.into(),
        reason: reason.into(),
    }
}

fn string_arg<'v>(call: &'v ToolCall, key: &str) -> Result<&'v str, ToolError> {
    call.args
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(&call.tool, format!("missing string field `{key}`")))
}

fn validate(call: &ToolCall) -> Result<(), ToolError> {
    if !TOOLS.contains(&call.tool.as_str()) {
        return Err(ToolError::UnknownTool(call.tool.clone()));
    }
    let Some(obj) = call.args.as_object() else {
        return Err(schema(&call.tool, "arguments must be an object"));
    };
    let allowed: &[&str] = match call.tool.as_str() {
        READ_ERROR_LOG => &[],
        RUN_SOLVER => &["script"],
        _ => &["script", "signature"],
    };
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(schema(&call.tool, format!("unexpected field `{extra}`")));
    }
    match call.tool.as_str() {
        RUN_SOLVER => {
            string_arg(call, "script")?;
        }
        PATCH_SCRIPT => {
            string_arg(call, "script")?;
            let sig = call.args.get("signature").ok_or_else(|| schema(&call.tool, "missing `signature`"))?;
            serde_json::from_value::<FailureSignature>(sig.clone())
                .map_err(|e| schema(&call.tool, format!("bad signature: {e}")))?;
        }
        _ => {}
    }
    Ok(())
}

fn permitted(tool: &str, config: &StrategyConfig) -> bool {
    match tool {
        READ_ERROR_LOG => config.log_tool_enabled,
        PATCH_SCRIPT => config.policy.permits(LadderLevel::L1RulePatch),
        _ => true,
    }
}

/// Dispatches one tool call. Denials and tool-level failures come back as
/// results; only unknown tools and schema violations are errors.
pub fn tool_dispatch(call: &ToolCall, config: &StrategyConfig, env: &ToolEnv<'_>) -> Result<ToolResult, ToolError> {
    validate(call)?;
    let result = |status, output| ToolResult {
        call_id: call.call_id,
        tool: call.tool.clone(),
        status,
        output,
    };
    if !permitted(&call.tool, config) {
        return Ok(result(
            ToolStatus::PermissionDenied,
            json!({ "error": format!("tool `{}` is not permitted under {}", call.tool, config.policy) }),
        ));
    }
    match call.tool.as_str() {
        READ_ERROR_LOG => Ok(match env.last_log {
            Some(log) => result(ToolStatus::Ok, json!({ "log": log.text() })),
            None => result(ToolStatus::Failed, json!({ "error": "no failed execution to read" })),
        }),
        RUN_SOLVER => {
            let script = parse_script(string_arg(call, "script")?).map_err(|e| schema(RUN_SOLVER, e.to_string()))?;
            Ok(match env.backend.execute(&script, env.task, &env.exec) {
                Ok(outcome) => result(ToolStatus::Ok, json!({ "outcome": outcome })),
                Err(e) => result(ToolStatus::Failed, json!({ "error": e.to_string() })),
            })
        }
        _ => {
            let script = parse_script(string_arg(call, "script")?).map_err(|e| schema(PATCH_SCRIPT, e.to_string()))?;
            let sig: FailureSignature =
                serde_json::from_value(call.args["signature"].clone()).expect("validated above");
            let patch = rule_patch(&script, &sig);
            Ok(result(
                ToolStatus::Ok,
                json!({
                    "script": render_script(&patch.patched),
                    "rules_applied": patch.rules_applied,
                    "changed": patch.changed,
                }),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apdl::{ExitStatus, FailureClass};
    use crate::corpus::generate_default_corpus;
    use crate::model::clean_script;
    use crate::recovery::Policy;
    use crate::solver::SimulatedBackend;

    fn call(tool: &str, args: Value) -> ToolCall {
        ToolCall {
            call_id: 7,
            tool: tool.into(),
            args,
        }
    }

    fn with_env<R>(f: impl FnOnce(&ToolEnv<'_>) -> R) -> R {
        let task = generate_default_corpus(42).tasks[0].clone();
        let log = SolverLog {
            lines: vec!["*** ERROR *** MESH GENERATION FAILED".into()],
            exit_status: ExitStatus::Failure,
        };
        let backend = SimulatedBackend::new();
        let env = ToolEnv {
            task: &task,
            backend: &backend,
            exec: ExecContext::default(),
            last_log: Some(&log),
        };
        f(&env)
    }

    #[test]
    fn log_tool_is_gated_by_strategy() {
        with_env(|env| {
            let c = call(READ_ERROR_LOG, json!({}));
            let no = tool_dispatch(&c, &StrategyConfig::for_policy(Policy::NoRecovery), env).unwrap();
            assert_eq!(no.status, ToolStatus::PermissionDenied);
            let model = tool_dispatch(&c, &StrategyConfig::for_policy(Policy::ModelOnly), env).unwrap();
            assert_eq!(model.status, ToolStatus::Ok);
            assert!(model.output["log"].as_str().unwrap().contains("MESH"));
            assert_eq!(model.call_id, 7);
        });
    }

    #[test]
    fn schema_and_unknown_tool_errors() {
        with_env(|env| {
            let cfg = StrategyConfig::for_policy(Policy::ModelOnly);
            assert!(matches!(
                tool_dispatch(&call(RUN_SOLVER, json!({})), &cfg, env),
                Err(ToolError::SchemaViolation { .. })
            ));
            assert!(matches!(
                tool_dispatch(&call(RUN_SOLVER, json!({"script": "SOLVE", "x": 1})), &cfg, env),
                Err(ToolError::SchemaViolation { .. })
            ));
            assert_eq!(
                tool_dispatch(&call("rm_rf", json!({})), &cfg, env),
                Err(ToolError::UnknownTool("rm_rf".into()))
            );
        });
    }

    #[test]
    fn run_solver_and_patch_script() {
        with_env(|env| {
            let text = render_script(&clean_script(env.task, 0));
            let cfg = StrategyConfig::for_policy(Policy::RuleOnly);
            let r = tool_dispatch(&call(RUN_SOLVER, json!({ "script": text })), &cfg, env).unwrap();
            assert_eq!(r.output["outcome"]["success"], json!(true));

            let sig = FailureSignature {
                class: FailureClass::ConvFail,
                message: "SOLUTION NOT CONVERGED".into(),
                command_ref: None,
            };
            let p = tool_dispatch(&call(PATCH_SCRIPT, json!({ "script": "SOLVE", "signature": sig })), &cfg, env)
                .unwrap();
            assert_eq!(p.output["rules_applied"], json!(["R2_Conv"]));
            let denied = tool_dispatch(
                &call(PATCH_SCRIPT, json!({ "script": "SOLVE", "signature": sig })),
                &StrategyConfig::for_policy(Policy::ModelOnly),
                env,
            )
            .unwrap();
            assert_eq!(denied.status, ToolStatus::PermissionDenied);
        });
    }
}
