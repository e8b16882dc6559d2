//! Solver backends behind one execution interface.
//!
//! [`SimulatedBackend`] is a predicate-based stand-in for MAPDL: each injected
//! fault class has a fixed predicate over the script, evaluated in
//! [`FailureClass::INJECTABLE`] order. The first unresolved fault produces a
//! failure log; otherwise the run succeeds with one image per plot directive.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apdl::{
    ApdlCommand, ApdlScript, ExitStatus, FailureClass, SolverLog, ERROR_SENTINEL,
    IMAGE_LINE_PREFIX, SUCCESS_TRAILER,
};
use crate::corpus::TaskSpec;

/// Commands that trigger meshing; the mesh key in force at the first of
/// these is the one that counts.
const MESH_COMMANDS: [&str; 4] = ["VMESH", "AMESH", "LMESH", "VSWEEP"];
/// Post-processing commands that each produce one image.
pub const PLOT_COMMANDS: [&str; 5] = ["PLNSOL", "PLESOL", "PLDISP", "PLVECT", "PLETAB"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendId {
    Simulated,
    ExternalCommand,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub success: bool,
    pub images: Vec<String>,
    pub log: SolverLog,
    pub solve_steps: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("script is empty")]
    InvalidScript,
    #[error("artifact i/o: {0}")]
    Io(String),
    #[error("external solver: {0}")]
    External(String),
}

/// Where and under which attempt number a script is executed.
#[derive(Debug, Clone, Default)]
pub struct ExecContext {
    pub attempt: u32,
    /// Directory for image artifacts. `None` records names without writing files.
    pub artifact_dir: Option<PathBuf>,
}

pub trait SolverBackend: Send + Sync {
    fn backend_id(&self) -> BackendId;
    fn execute(
        &self,
        script: &ApdlScript,
        task: &TaskSpec,
        ctx: &ExecContext,
    ) -> Result<SimOutcome, SolverError>;
}

/// Image artifact name for a case/attempt; `n` counts from 1.
pub fn artifact_name(case_id: u32, attempt: u32, n: usize) -> String {
    format!("plot_{case_id}_{attempt}_{n}.png")
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn first_mesh_index(script: &ApdlScript) -> Option<usize> {
    script
        .commands
        .iter()
        .position(|c| MESH_COMMANDS.iter().any(|m| c.is(m)))
}

/// Mesh key in force when meshing starts (or at end of script without a
/// meshing command).
pub fn effective_mesh_key(script: &ApdlScript) -> Option<String> {
    let end = first_mesh_index(script).unwrap_or(script.commands.len());
    script.commands[..end]
        .iter()
        .rev()
        .find(|c| c.is("MSHKEY"))
        .map(|c| c.arg(0).to_string())
}

pub fn solve_steps(script: &ApdlScript) -> u32 {
    script.find_all("SOLVE").count() as u32
}

pub fn plot_count(script: &ApdlScript) -> usize {
    script
        .commands
        .iter()
        .filter(|c| PLOT_COMMANDS.iter().any(|p| c.is(p)))
        .count()
}

/// Returns the failure message for `class` if the script leaves it unresolved.
pub fn unresolved_message(class: FailureClass, script: &ApdlScript, task: &TaskSpec) -> Option<String> {
    match class {
        FailureClass::MeshFail => {
            let threshold = task.geometry.mesh_size_mm;
            if effective_mesh_key(script).as_deref() == Some("0") {
                return None;
            }
            let sizes: Vec<&ApdlCommand> = script.find_all("ESIZE").collect();
            let too_small = sizes
                .iter()
                .find(|c| c.arg_f64(0).is_none_or(|v| v < threshold));
            match (sizes.is_empty(), too_small) {
                (true, _) => Some("MESH FAILURE: no element size defined for mapped mesh".into()),
                (false, Some(c)) => Some(format!(
                    "MESH FAILURE: element size too small (ESIZE {} < {}) [line {}]",
                    c.arg(0),
                    fmt_num(threshold),
                    c.line_no
                )),
                (false, None) => None,
            }
        }
        FailureClass::ConvFail => {
            let Some(first_solve) = script.position("SOLVE") else {
                return Some("SOLUTION NOT CONVERGED: no SOLVE command issued".into());
            };
            let before = &script.commands[..first_solve];
            let autots_on = before
                .iter()
                .rev()
                .find(|c| c.is("AUTOTS"))
                .is_some_and(|c| c.arg(0).eq_ignore_ascii_case("ON"));
            let nsubst = before.iter().any(|c| c.is("NSUBST"));
            if autots_on && nsubst {
                None
            } else {
                Some(format!(
                    "SOLUTION NOT CONVERGED at substep 1 of 1: force imbalance exceeds tolerance [line {}]",
                    script.commands[first_solve].line_no
                ))
            }
        }
        FailureClass::ElemTypeFail => {
            let allowed = task.category.compatible_elements();
            let ets: Vec<&ApdlCommand> = script.find_all("ET").collect();
            if ets.is_empty() {
                return Some(format!(
                    "ELEMENT TYPE UNDEFINED IS INVALID FOR {} ANALYSIS",
                    task.category.as_str().to_ascii_uppercase()
                ));
            }
            ets.iter()
                .find(|c| !allowed.iter().any(|e| c.arg(1).eq_ignore_ascii_case(e)))
                .map(|c| {
                    format!(
                        "ELEMENT TYPE {} IS INVALID FOR {} ANALYSIS [line {}]",
                        c.arg(1).to_ascii_uppercase(),
                        task.category.as_str().to_ascii_uppercase(),
                        c.line_no
                    )
                })
        }
        FailureClass::MissingResults => {
            let steps = solve_steps(script);
            script.find_all("SET").find_map(|c| {
                let target = c.arg(0);
                if target.is_empty()
                    || ["LAST", "FIRST", "NEXT", "LIST"]
                        .iter()
                        .any(|k| target.eq_ignore_ascii_case(k))
                {
                    return None;
                }
                match target.parse::<f64>() {
                    Ok(step) if step >= 1.0 && step <= steps as f64 => None,
                    _ => Some(format!(
                        "NO RESULTS FOR LOAD STEP {target} ({steps} LOAD STEPS ON FILE) [line {}]",
                        c.line_no
                    )),
                }
            })
        }
        FailureClass::HardGeom => Some(
            "GEOMETRY DECOMPOSITION FAILED: thin-wall region cannot be swept; mesh quality below limits"
                .into(),
        ),
        FailureClass::Unknown => None,
    }
}

/// First unresolved injected fault in predicate order, with its message.
pub fn first_unresolved(script: &ApdlScript, task: &TaskSpec) -> Option<(FailureClass, String)> {
    FailureClass::INJECTABLE
        .iter()
        .filter(|c| task.fault_profile.injects(**c))
        .find_map(|c| unresolved_message(*c, script, task).map(|m| (*c, m)))
}

#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    id: BackendId,
}

impl Default for SimulatedBackend {
    fn default() -> Self {
        Self {
            id: BackendId::Simulated,
        }
    }
}

impl SimulatedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn fallback() -> Self {
        Self {
            id: BackendId::Fallback,
        }
    }
}

/// Evaluates the fault predicates without touching the filesystem.
pub fn execute_simulated(script: &ApdlScript, task: &TaskSpec, attempt: u32) -> Result<SimOutcome, SolverError> {
    if script.is_empty() {
        return Err(SolverError::InvalidScript);
    }
    let steps = solve_steps(script);
    let mut lines = vec![
        "SIMULATED MAPDL BACKEND".to_string(),
        format!("CASE {} ATTEMPT {}", task.case_id, attempt),
        format!("READING INPUT: {} COMMANDS", script.len()),
    ];
    if let Some((_, message)) = first_unresolved(script, task) {
        lines.push(format!("{ERROR_SENTINEL}{message}"));
        lines.push("SOLUTION TERMINATED".into());
        return Ok(SimOutcome {
            success: false,
            images: Vec::new(),
            log: SolverLog {
                lines,
                exit_status: ExitStatus::Failure,
            },
            solve_steps: steps,
        });
    }
    let images: Vec<String> = (1..=plot_count(script).max(1))
        .map(|n| artifact_name(task.case_id, attempt, n))
        .collect();
    lines.push(format!("LOAD STEPS SOLVED: {steps}"));
    lines.extend(images.iter().map(|p| format!("{IMAGE_LINE_PREFIX}{p}")));
    lines.push(SUCCESS_TRAILER.into());
    Ok(SimOutcome {
        success: true,
        images,
        log: SolverLog {
            lines,
            exit_status: ExitStatus::Success,
        },
        solve_steps: steps,
    })
}

fn write_markers(dir: &Path, images: &[String]) -> Result<(), SolverError> {
    std::fs::create_dir_all(dir).map_err(|e| SolverError::Io(e.to_string()))?;
    for name in images {
        std::fs::File::create(dir.join(name)).map_err(|e| SolverError::Io(e.to_string()))?;
    }
    Ok(())
}

impl SolverBackend for SimulatedBackend {
    fn backend_id(&self) -> BackendId {
        self.id
    }

    fn execute(&self, script: &ApdlScript, task: &TaskSpec, ctx: &ExecContext) -> Result<SimOutcome, SolverError> {
        let outcome = execute_simulated(script, task, ctx.attempt)?;
        if let Some(dir) = &ctx.artifact_dir {
            write_markers(dir, &outcome.images)?;
        }
        Ok(outcome)
    }
}

/// Runs a configured executable as `<command> <script.inp>` in the artifact
/// directory and adapts its stdout to a [`SolverLog`].
#[derive(Debug, Clone)]
pub struct ExternalCommandBackend {
    pub command: PathBuf,
    pub workdir: PathBuf,
    pub timeout: Duration,
}

impl ExternalCommandBackend {
    pub fn is_available(command: &Path) -> bool {
        command.is_file()
    }
}

impl SolverBackend for ExternalCommandBackend {
    fn backend_id(&self) -> BackendId {
        BackendId::ExternalCommand
    }

    fn execute(&self, script: &ApdlScript, task: &TaskSpec, ctx: &ExecContext) -> Result<SimOutcome, SolverError> {
        if script.is_empty() {
            return Err(SolverError::InvalidScript);
        }
        let dir = ctx.artifact_dir.clone().unwrap_or_else(|| self.workdir.clone());
        std::fs::create_dir_all(&dir).map_err(|e| SolverError::Io(e.to_string()))?;
        let input = dir.join(format!("case{}_attempt{}.inp", task.case_id, ctx.attempt));
        std::fs::write(&input, crate::apdl::render_script(script)).map_err(|e| SolverError::Io(e.to_string()))?;

        let mut child = Command::new(&self.command)
            .arg(&input)
            .current_dir(&dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SolverError::External(e.to_string()))?;
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|e| SolverError::External(e.to_string()))? {
                break Some(status);
            }
            if started.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let mut stdout = String::new();
        if let Some(mut out) = child.stdout.take() {
            let _ = out.read_to_string(&mut stdout);
        }
        let mut lines: Vec<String> = stdout.lines().map(str::to_string).collect();
        let images: Vec<String> = lines
            .iter()
            .filter_map(|l| l.strip_prefix(IMAGE_LINE_PREFIX).map(|p| p.trim().to_string()))
            .collect();
        let exited_ok = status.is_some_and(|s| s.success());
        let success = exited_ok && !images.is_empty();
        if !success && !lines.iter().any(|l| l.starts_with(ERROR_SENTINEL)) {
            let reason = match status {
                None => "EXTERNAL SOLVER TIMED OUT".to_string(),
                Some(s) if s.success() => "EXTERNAL SOLVER PRODUCED NO IMAGES".to_string(),
                Some(s) => format!("EXTERNAL SOLVER EXITED WITH {s}"),
            };
            lines.push(format!("{ERROR_SENTINEL}{reason}"));
        }
        Ok(SimOutcome {
            success,
            images: if success { images } else { Vec::new() },
            log: SolverLog {
                lines,
                exit_status: if success { ExitStatus::Success } else { ExitStatus::Failure },
            },
            solve_steps: solve_steps(script),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub preference: Vec<BackendId>,
    #[serde(default)]
    pub external_command: Option<PathBuf>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

/// First available backend in preference order; the simulator is the
/// guaranteed fallback.
pub fn select_backend(config: &BackendConfig) -> Box<dyn SolverBackend> {
    for pref in &config.preference {
        match pref {
            BackendId::Simulated => return Box::new(SimulatedBackend::new()),
            BackendId::Fallback => return Box::new(SimulatedBackend::fallback()),
            BackendId::ExternalCommand => {
                if let Some(cmd) = config
                    .external_command
                    .as_ref()
                    .filter(|c| ExternalCommandBackend::is_available(c))
                {
                    return Box::new(ExternalCommandBackend {
                        command: cmd.clone(),
                        workdir: config.workdir.clone().unwrap_or_else(std::env::temp_dir),
                        timeout: Duration::from_secs(600),
                    });
                }
            }
        }
    }
    Box::new(SimulatedBackend::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apdl::{extract_failure, parse_script};
    use crate::corpus::{Category, FaultProfile, Geometry};

    fn task(category: Category, faults: &[FailureClass], mesh: f64) -> TaskSpec {
        TaskSpec {
            case_id: 3,
            category,
            prompt: "p".into(),
            geometry: Geometry {
                shape: "plate".into(),
                dimensions_mm: vec![100.0, 50.0, 10.0],
                load: None,
                mesh_size_mm: mesh,
            },
            fault_profile: FaultProfile {
                injected_faults: faults.to_vec(),
                rule_resolvable: faults.iter().copied().collect(),
                model_resolvable: faults.iter().copied().collect(),
            },
            hard: false,
        }
    }

    fn run(text: &str, t: &TaskSpec) -> SimOutcome {
        execute_simulated(&parse_script(text).unwrap(), t, 1).unwrap()
    }

    #[test]
    fn mesh_fail_below_threshold() {
        let t = task(Category::Static, &[FailureClass::MeshFail], 4.0);
        let out = run("ESIZE,2\nVMESH,ALL\nSOLVE", &t);
        assert!(!out.success);
        assert!(out.images.is_empty());
        assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::MeshFail);

        let out = run("ESIZE,4\nVMESH,ALL\nSOLVE", &t);
        assert!(out.success);
        assert_eq!(out.images, vec!["plot_3_1_1.png"]);
        assert_eq!(out.log.lines.last().unwrap(), SUCCESS_TRAILER);

        assert!(run("ESIZE,2\nMSHKEY,0\nVMESH,ALL\nSOLVE", &t).success);
        // A later mapped-mesh request overrides the free-mesh fallback.
        assert!(!run("ESIZE,2\nMSHKEY,0\nMSHKEY,1\nVMESH,ALL\nSOLVE", &t).success);
    }

    #[test]
    fn clean_task_always_succeeds() {
        let t = task(Category::Static, &[], 4.0);
        let out = run("ESIZE,1\nSOLVE\nSET,9\nPLNSOL,S,EQV\nPLDISP,1", &t);
        assert!(out.success);
        assert_eq!(out.images, vec!["plot_3_1_1.png", "plot_3_1_2.png"]);
    }

    #[test]
    fn conv_fail_needs_autots_and_nsubst_before_solve() {
        let t = task(Category::Static, &[FailureClass::ConvFail], 4.0);
        assert!(!run("AUTOTS,OFF\nSOLVE", &t).success);
        assert!(!run("AUTOTS,ON\nSOLVE\nNSUBST,10", &t).success);
        assert!(run("AUTOTS,OFF\nAUTOTS,ON\nNSUBST,10,100,5\nSOLVE", &t).success);
    }

    #[test]
    fn elem_type_compatibility() {
        let t = task(Category::Thermal, &[FailureClass::ElemTypeFail], 4.0);
        let out = run("ET,1,SOLID185\nSOLVE", &t);
        let sig = extract_failure(&out.log).unwrap();
        assert_eq!(sig.class, FailureClass::ElemTypeFail);
        assert_eq!(sig.command_ref, Some(1));
        assert!(run("ET,1,SOLID70\nSOLVE", &t).success);
        assert!(!run("SOLVE", &t).success);
    }

    #[test]
    fn missing_results_step_range() {
        let t = task(Category::Static, &[FailureClass::MissingResults], 4.0);
        let out = run("SOLVE\nSET,3,1\nPLNSOL,S,EQV", &t);
        assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::MissingResults);
        assert!(run("SOLVE\nSET,LAST\nPLNSOL,S,EQV", &t).success);
        assert!(run("SOLVE\nSET,1,2\nPLNSOL,S,EQV", &t).success);
    }

    #[test]
    fn predicates_evaluated_in_fixed_order() {
        let t = task(
            Category::Static,
            &[FailureClass::MissingResults, FailureClass::MeshFail],
            4.0,
        );
        let out = run("ESIZE,1\nSOLVE\nSET,3", &t);
        assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::MeshFail);
    }

    #[test]
    fn hard_geometry_never_resolves() {
        let t = task(Category::Static, &[FailureClass::HardGeom], 4.0);
        let out = run("ESIZE,40\nMSHKEY,0\nAUTOTS,ON\nNSUBST,5\nSOLVE\nSET,LAST", &t);
        assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::HardGeom);
    }

    #[test]
    fn empty_script_is_invalid() {
        let t = task(Category::Static, &[], 4.0);
        assert_eq!(
            execute_simulated(&ApdlScript::default(), &t, 1),
            Err(SolverError::InvalidScript)
        );
    }

    #[test]
    fn execution_is_deterministic() {
        let t = task(Category::Static, &[FailureClass::MeshFail], 4.0);
        let s = parse_script("ESIZE,2\nSOLVE").unwrap();
        assert_eq!(execute_simulated(&s, &t, 2), execute_simulated(&s, &t, 2));
    }

    #[test]
    fn writes_marker_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = task(Category::Static, &[], 4.0);
        let ctx = ExecContext {
            attempt: 1,
            artifact_dir: Some(dir.path().to_path_buf()),
        };
        let out = SimulatedBackend::new()
            .execute(&parse_script("SOLVE\nPLDISP").unwrap(), &t, &ctx)
            .unwrap();
        let f = dir.path().join(&out.images[0]);
        assert_eq!(std::fs::metadata(f).unwrap().len(), 0);
    }

    #[test]
    fn backend_selection() {
        let cfg = BackendConfig {
            preference: vec![BackendId::ExternalCommand, BackendId::Simulated],
            external_command: Some("/nonexistent/mapdl".into()),
            workdir: None,
        };
        assert_eq!(select_backend(&cfg).backend_id(), BackendId::Simulated);
        let cfg = BackendConfig {
            preference: vec![BackendId::Simulated],
            ..Default::default()
        };
        assert_eq!(select_backend(&cfg).backend_id(), BackendId::Simulated);
        assert_eq!(
            select_backend(&BackendConfig::default()).backend_id(),
            BackendId::Simulated
        );
        let cfg = BackendConfig {
            preference: vec![BackendId::Fallback],
            ..Default::default()
        };
        assert_eq!(select_backend(&cfg).backend_id(), BackendId::Fallback);
    }

    #[cfg(unix)]
    #[test]
    fn external_command_adapter() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let exe = dir.path().join("fake_mapdl.sh");
        std::fs::write(
            &exe,
            "#!/bin/sh\nif grep -q BAD \"$1\"; then echo '*** ERROR *** SOLUTION NOT CONVERGED'; exit 8; fi\necho 'IMAGE WRITTEN: out.png'\necho 'SOLUTION COMPLETE'\n",
        )
        .unwrap();
        std::fs::set_permissions(&exe, std::fs::Permissions::from_mode(0o755)).unwrap();
        let cfg = BackendConfig {
            preference: vec![BackendId::ExternalCommand],
            external_command: Some(exe),
            workdir: Some(dir.path().to_path_buf()),
        };
        let backend = select_backend(&cfg);
        assert_eq!(backend.backend_id(), BackendId::ExternalCommand);
        let t = task(Category::Static, &[], 4.0);
        let ok = backend
            .execute(&parse_script("SOLVE").unwrap(), &t, &ExecContext::default())
            .unwrap();
        assert!(ok.success);
        assert_eq!(ok.images, vec!["out.png"]);
        let bad = backend
            .execute(&parse_script("BAD\nSOLVE").unwrap(), &t, &ExecContext::default())
            .unwrap();
        assert!(!bad.success);
        assert_eq!(extract_failure(&bad.log).unwrap().class, FailureClass::ConvFail);
    }
}
