//! WebAssembly bindings for the static demo page.
//!
//! Every function takes plain strings and numbers and returns a JSON string,
//! so the page needs no generated type glue.

use apdl_harness::apdl::{extract_failure, parse_script, render_script};
use apdl_harness::bench::{execute_job, BenchEnv, Job};
use apdl_harness::corpus::{generate_default_corpus, TaskSpec};
use apdl_harness::model::initial_script;
use apdl_harness::orchestrator::trace::Clock;
use apdl_harness::recovery::{rule_patch, Policy};
use apdl_harness::scoring::stats::{binomial_ci, cliffs_delta, effect_label, mann_whitney_u, prob_superiority, MwMode, EXACT_MAX_N};
use apdl_harness::solver::execute_simulated;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const CORPUS_SEED: u64 = 42;

fn task(case_id: u32) -> Result<TaskSpec, String> {
    generate_default_corpus(CORPUS_SEED)
        .task(case_id)
        .cloned()
        .ok_or_else(|| format!("no case {case_id}; pick 1 to 50"))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsError> {
    result
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

/// Runs one case under a strategy and returns its record, scores and trace.
pub fn run_case_json(case_id: u32, strategy: &str, repeat: u32, seed: u64) -> Result<Value, String> {
    let policy: Policy = strategy.parse().map_err(|e: apdl_harness::recovery::UnknownPolicy| e.to_string())?;
    let task = task(case_id)?;
    let env = BenchEnv {
        clock: Clock::Fixed(0),
        ..BenchEnv::default()
    };
    let job = Job {
        case_id,
        strategy: policy,
        repeat,
    };
    let r = execute_job(job, &task, seed, &env, None, &mut |_| false).map_err(|e| e.to_string())?;
    Ok(json!({
        "record": r.output.record,
        "scores": r.scored,
        "trace": r.output.events,
    }))
}

/// First-pass script the scripted model writes for a case.
pub fn first_script_json(case_id: u32, seed: u64) -> Result<Value, String> {
    let task = task(case_id)?;
    Ok(json!({ "script": render_script(&initial_script(&task, seed)) }))
}

/// Executes `script` against a case on the simulator. On failure, applies
/// one deterministic rule patch and executes the patched script.
pub fn patch_preview_json(script: &str, case_id: u32) -> Result<Value, String> {
    let task = task(case_id)?;
    let parsed = parse_script(script).map_err(|e| e.to_string())?;
    let before = execute_simulated(&parsed, &task, 1).map_err(|e| e.to_string())?;
    if before.success {
        return Ok(json!({ "before": before.log.lines, "success": true }));
    }
    let sig = extract_failure(&before.log).map_err(|e| e.to_string())?;
    let patch = rule_patch(&parsed, &sig);
    let after = execute_simulated(&patch.patched, &task, 2).map_err(|e| e.to_string())?;
    Ok(json!({
        "before": before.log.lines,
        "class": sig.class,
        "rules_applied": patch.rules_applied,
        "changed": patch.changed,
        "patched": render_script(&patch.patched),
        "after": after.log.lines,
        "success": after.success,
    }))
}

fn parse_sample(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

/// Effect size and rank test for two score samples, plus the 95% interval
/// of `successes` out of `trials`.
pub fn compare_json(x: &str, y: &str, successes: u64, trials: u64) -> Result<Value, String> {
    let (x, y) = (parse_sample(x)?, parse_sample(y)?);
    let delta = cliffs_delta(&x, &y).map_err(|e| e.to_string())?;
    let mode = if x.len() + y.len() <= EXACT_MAX_N {
        MwMode::Exact
    } else {
        MwMode::NormalApprox
    };
    let mw = mann_whitney_u(&x, &y, mode).map_err(|e| e.to_string())?;
    let ci = if trials > 0 {
        let (lo, hi) = binomial_ci(successes, trials, 0.95).map_err(|e| e.to_string())?;
        json!([lo, hi])
    } else {
        Value::Null
    };
    Ok(json!({
        "delta": delta,
        "label": effect_label(delta),
        "prob_superiority": prob_superiority(delta),
        "u": mw.u,
        "p_two_sided": mw.p_two_sided,
        "test": mode,
        "ci95": ci,
    }))
}

#[wasm_bindgen]
pub fn run_case(case_id: u32, strategy: &str, repeat: u32, seed: u64) -> Result<String, JsError> {
    to_js(run_case_json(case_id, strategy, repeat, seed))
}

#[wasm_bindgen]
pub fn first_script(case_id: u32, seed: u64) -> Result<String, JsError> {
    to_js(first_script_json(case_id, seed))
}

#[wasm_bindgen]
pub fn patch_preview(script: &str, case_id: u32) -> Result<String, JsError> {
    to_js(patch_preview_json(script, case_id))
}

#[wasm_bindgen]
pub fn compare(x: &str, y: &str, successes: u64, trials: u64) -> Result<String, JsError> {
    to_js(compare_json(x, y, successes, trials))
}
