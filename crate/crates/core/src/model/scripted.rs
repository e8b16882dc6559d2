//! Deterministic scripted model: category templates with seeded defects on
//! generation, and a competence table that decides which failures a repair
//! call fixes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelClient, ModelError, RepairRequest};
use crate::apdl::{parse_script, ApdlCommand, ApdlScript, FailureClass};
use crate::corpus::{Category, TaskSpec};
use crate::seed::unit_draw;
use crate::solver::solve_steps;

const SALT_ELEMENT: u64 = 11;
const SALT_REPAIR: u64 = 13;
const SALT_STOP: u64 = 17;

fn n(v: f64) -> String {
    format!("{v}")
}

fn dim(task: &TaskSpec, i: usize, default: f64) -> f64 {
    task.geometry.dimensions_mm.get(i).copied().unwrap_or(default)
}

fn geometry_block(task: &TaskSpec) -> String {
    let (a, b, c) = (dim(task, 0, 100.0), dim(task, 1, 20.0), dim(task, 2, 10.0));
    match task.geometry.shape.as_str() {
        "pressure_vessel" => format!("CYLIND,{},{},0,{}", n(a / 2.0), n(a / 2.0 - c), n(b)),
        "shaft" => format!("CYLIND,{},0,0,{}", n(b / 2.0), n(a)),
        "thin_wall_tube" => format!("CYLIND,{},{},0,{}", n(a / 2.0), n(a / 2.0 - c), n(b)),
        "pin_joint_plate" => {
            let d = dim(task, 3, 20.0);
            format!(
                "BLOCK,0,{},0,{},0,{}\nCYL4,{},{},{},,,,{}\nVSBV,1,2",
                n(a),
                n(b),
                n(c),
                n(a / 2.0),
                n(b / 2.0),
                n(d / 2.0),
                n(c)
            )
        }
        _ => format!("BLOCK,0,{},0,{},0,{}", n(a), n(b), n(c)),
    }
}

/// Element formulation the clean template uses for this task and seed.
fn clean_element(task: &TaskSpec, seed: u64) -> &'static str {
    let second = unit_draw(&[seed, task.case_id as u64, SALT_ELEMENT]) < 0.5;
    match (task.category, second) {
        (Category::Thermal, false) => "SOLID70",
        (Category::Thermal, true) => "SOLID90",
        (_, false) => "SOLID185",
        (_, true) => "SOLID186",
    }
}

struct Defects {
    element: String,
    esize: f64,
    mapped_mesh: bool,
    autots_off: bool,
    bad_set_step: bool,
}

fn render_template(task: &TaskSpec, d: &Defects) -> String {
    let g = &task.geometry;
    let length = dim(task, 0, 100.0);
    let load = g.load.as_ref().map(|l| l.magnitude).unwrap_or(0.0);
    let mut s = String::new();
    s.push_str(&format!("! case {}: {} analysis of {}\n", task.case_id, task.category, g.shape));
    s.push_str("/PREP7\n");
    s.push_str(&format!("ET,1,{}\n", d.element));
    match task.category {
        Category::Thermal => s.push_str("MP,KXX,1,167\n"),
        _ => {
            s.push_str("MP,EX,1,2.1E5\nMP,PRXY,1,0.3\n");
            if task.category == Category::Modal {
                s.push_str("MP,DENS,1,7.85E-9\n");
            }
        }
    }
    s.push_str(&geometry_block(task));
    s.push('\n');
    s.push_str(&format!("ESIZE,{}\n", n(d.esize)));
    if d.mapped_mesh {
        s.push_str("MSHKEY,1\n");
    }
    s.push_str("VMESH,ALL\nFINISH\n/SOLU\n");
    match task.category {
        Category::Modal => s.push_str("ANTYPE,MODAL\nMODOPT,LANB,3\n"),
        _ => s.push_str("ANTYPE,STATIC\n"),
    }
    if d.autots_off {
        s.push_str("AUTOTS,OFF\n");
    }
    s.push_str("NSEL,S,LOC,X,0\n");
    match task.category {
        Category::Thermal => s.push_str("D,ALL,TEMP,20\n"),
        _ => s.push_str("D,ALL,ALL\n"),
    }
    match task.category {
        Category::Static => s.push_str(&format!(
            "NSEL,S,LOC,X,{}\nF,ALL,FY,{}\n",
            n(length),
            n(-load)
        )),
        Category::Thermal => s.push_str(&format!(
            "NSEL,S,LOC,X,{}\nSF,ALL,HFLUX,{}\n",
            n(length),
            n(load)
        )),
        Category::Modal => {}
    }
    s.push_str("ALLSEL\nSOLVE\nFINISH\n/POST1\n");
    let step = if d.bad_set_step { "3" } else { "1" };
    match task.category {
        Category::Static => {
            if d.bad_set_step {
                s.push_str("SET,3,1\n");
            } else {
                s.push_str("SET,LAST\n");
            }
            s.push_str("PLNSOL,S,EQV\nPLDISP,1\n");
        }
        Category::Modal => s.push_str(&format!("SET,{step},1\nPLDISP,1\nSET,{step},2\nPLDISP,1\n")),
        Category::Thermal => {
            if d.bad_set_step {
                s.push_str("SET,3,1\n");
            } else {
                s.push_str("SET,LAST\n");
            }
            s.push_str("PLNSOL,TEMP\n");
        }
    }
    s.push_str("FINISH\n");
    s
}

/// Defect-free script for the task; the reference for expected artifacts.
pub fn clean_script(task: &TaskSpec, seed: u64) -> ApdlScript {
    let d = Defects {
        element: clean_element(task, seed).into(),
        esize: task.geometry.mesh_size_mm,
        mapped_mesh: false,
        autots_off: false,
        bad_set_step: false,
    };
    parse_script(&render_template(task, &d)).expect("template parses")
}

/// First-pass script: the clean template plus one defect per injected fault.
/// Faults outside the task's rule-resolvable set get the rule-resistant
/// variant of their defect.
pub fn initial_script(task: &TaskSpec, seed: u64) -> ApdlScript {
    let fp = &task.fault_profile;
    let clean = clean_element(task, seed);
    let mut d = Defects {
        element: clean.into(),
        esize: task.geometry.mesh_size_mm,
        mapped_mesh: false,
        autots_off: false,
        bad_set_step: false,
    };
    if fp.injects(FailureClass::MeshFail) {
        if fp.rule_resistant(FailureClass::MeshFail) {
            d.esize = task.geometry.mesh_size_mm / 4.0;
            d.mapped_mesh = true;
        } else {
            d.esize = task.geometry.mesh_size_mm / 2.0;
        }
    }
    if fp.injects(FailureClass::ConvFail) {
        d.autots_off = true;
    }
    if fp.injects(FailureClass::ElemTypeFail) {
        d.element = match (task.category, fp.rule_resistant(FailureClass::ElemTypeFail)) {
            (Category::Thermal, false) if clean == "SOLID90" => "SOLID186".into(),
            (Category::Thermal, false) => "SOLID185".into(),
            (Category::Thermal, true) if clean == "SOLID90" => "BEAM188".into(),
            (Category::Thermal, true) => "SHELL181".into(),
            // structural analyses reject thermal solids
            (_, _) => "SOLID70".into(),
        };
    }
    if fp.injects(FailureClass::MissingResults) {
        d.bad_set_step = true;
    }
    parse_script(&render_template(task, &d)).expect("template parses")
}

/// Per-class probability that a repair call fixes the failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetenceTable(pub BTreeMap<FailureClass, f64>);

impl Default for CompetenceTable {
    fn default() -> Self {
        Self(BTreeMap::from([
            (FailureClass::MeshFail, 1.0),
            (FailureClass::ConvFail, 1.0),
            (FailureClass::ElemTypeFail, 1.0),
            (FailureClass::MissingResults, 1.0),
            (FailureClass::HardGeom, 0.0),
        ]))
    }
}

impl CompetenceTable {
    /// Geometry failures are never repairable; unlisted classes count as 0.
    pub fn probability(&self, class: FailureClass) -> f64 {
        match class {
            FailureClass::HardGeom | FailureClass::Unknown => 0.0,
            c => self.0.get(&c).copied().unwrap_or(0.0).clamp(0.0, 1.0),
        }
    }

    pub fn with(mut self, class: FailureClass, p: f64) -> Self {
        self.0.insert(class, p);
        self
    }
}

fn fix_mesh(commands: &mut Vec<ApdlCommand>, task: &TaskSpec) {
    let size = task.geometry.mesh_size_mm;
    commands.retain(|c| !(c.is("MSHKEY") && c.arg(0) != "0"));
    let mut found = false;
    for c in commands.iter_mut().filter(|c| c.is("ESIZE")) {
        found = true;
        if c.arg_f64(0).is_none_or(|v| v < size) {
            c.args = vec![n(size)];
        }
    }
    if !found {
        let at = commands.iter().position(|c| c.is("VMESH")).unwrap_or(0);
        commands.insert(at, ApdlCommand::new("ESIZE", [n(size)]));
    }
}

fn fix_convergence(commands: &mut Vec<ApdlCommand>) {
    commands.retain(|c| !(c.is("AUTOTS") && !c.arg(0).eq_ignore_ascii_case("ON")));
    let solve = match commands.iter().position(|c| c.is("SOLVE")) {
        Some(i) => i,
        None => {
            commands.push(ApdlCommand::new("SOLVE", Vec::<String>::new()));
            commands.len() - 1
        }
    };
    commands.splice(
        solve..solve,
        [
            ApdlCommand::new("AUTOTS", ["ON"]),
            ApdlCommand::new("NSUBST", ["20", "200", "10"]),
        ],
    );
}

fn fix_element(commands: &mut [ApdlCommand], task: &TaskSpec) {
    let allowed = task.category.compatible_elements();
    for c in commands.iter_mut().filter(|c| c.is("ET")) {
        if !allowed.iter().any(|e| c.arg(1).eq_ignore_ascii_case(e)) {
            while c.args.len() < 2 {
                c.args.push(String::new());
            }
            c.args[1] = allowed[0].to_string();
        }
    }
}

fn fix_results(commands: &mut [ApdlCommand], steps: u32) {
    let last = steps.max(1) as f64;
    for c in commands.iter_mut().filter(|c| c.is("SET")) {
        if let Ok(step) = c.arg(0).parse::<f64>() {
            if step > last || step < 1.0 {
                c.args[0] = n(last);
            }
        }
    }
}

/// Applies the competent repair for `class`. Classes without a repair leave
/// the commands untouched.
pub(crate) fn corrected(script: &ApdlScript, class: FailureClass, task: &TaskSpec) -> ApdlScript {
    let mut commands = script.commands.clone();
    match class {
        FailureClass::MeshFail => fix_mesh(&mut commands, task),
        FailureClass::ConvFail => fix_convergence(&mut commands),
        FailureClass::ElemTypeFail => {
            fix_element(&mut commands, task);
            if !commands.iter().any(|c| c.is("ET")) {
                let at = commands.iter().position(|c| c.is("PREP7")).map_or(0, |i| i + 1);
                commands.insert(
                    at,
                    ApdlCommand::new("ET", ["1", task.category.compatible_elements()[0]]),
                );
            }
        }
        FailureClass::MissingResults => fix_results(&mut commands, solve_steps(script)),
        FailureClass::HardGeom | FailureClass::Unknown => return script.clone(),
    }
    ApdlScript::from_commands(commands).normalized()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedModel {
    pub competence: CompetenceTable,
    /// Probability that the model asks to stop after a failed execution.
    pub stop_propensity: f64,
}

impl Default for ScriptedModel {
    fn default() -> Self {
        Self {
            competence: CompetenceTable::default(),
            stop_propensity: 0.5,
        }
    }
}

impl ScriptedModel {
    pub fn new(competence: CompetenceTable) -> Self {
        Self {
            competence,
            ..Self::default()
        }
    }

    /// Whether the repair of failed attempt `attempt` succeeds.
    pub fn repair_succeeds(&self, class: FailureClass, case_id: u32, attempt: u32, seed: u64) -> bool {
        let p = self.competence.probability(class);
        p > 0.0 && unit_draw(&[seed, case_id as u64, attempt as u64, SALT_REPAIR]) < p
    }
}

impl ModelClient for ScriptedModel {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate_initial(&self, task: &TaskSpec, seed: u64) -> Result<ApdlScript, ModelError> {
        Ok(initial_script(task, seed))
    }

    fn repair(&self, req: &RepairRequest<'_>) -> Result<ApdlScript, ModelError> {
        if self.repair_succeeds(req.sig.class, req.task.case_id, req.attempt, req.seed) {
            Ok(corrected(req.script, req.sig.class, req.task))
        } else {
            Ok(req.script.clone())
        }
    }

    fn requests_stop_after_failure(&self, task: &TaskSpec, attempt: u32, seed: u64) -> bool {
        unit_draw(&[seed, task.case_id as u64, attempt as u64, SALT_STOP]) < self.stop_propensity
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apdl::{extract_failure, FailureSignature};
    use crate::corpus::generate_default_corpus;
    use crate::solver::{execute_simulated, plot_count};

    fn sig(class: FailureClass) -> FailureSignature {
        FailureSignature {
            class,
            message: String::new(),
            command_ref: None,
        }
    }

    #[test]
    fn clean_tasks_get_clean_scripts() {
        let corpus = generate_default_corpus(42);
        for t in corpus.tasks.iter().filter(|t| t.fault_profile.is_clean()) {
            let s = initial_script(t, 5);
            assert!(execute_simulated(&s, t, 1).unwrap().success, "case {}", t.case_id);
            assert!(s.same_commands(&clean_script(t, 5)));
        }
    }

    #[test]
    fn injected_faults_fail_first_pass() {
        let corpus = generate_default_corpus(42);
        for t in corpus.tasks.iter().filter(|t| !t.fault_profile.is_clean()) {
            let s = initial_script(t, 5);
            let out = execute_simulated(&s, t, 1).unwrap();
            let class = extract_failure(&out.log).unwrap().class;
            assert_eq!(class, t.fault_profile.injected_faults[0], "case {}", t.case_id);
        }
    }

    #[test]
    fn missing_results_defect_has_out_of_range_set() {
        let corpus = generate_default_corpus(42);
        let t = corpus
            .tasks
            .iter()
            .find(|t| t.fault_profile.injects(FailureClass::MissingResults))
            .unwrap();
        let s = initial_script(t, 0);
        assert!(s.find_all("SET").any(|c| c.arg(0) == "3"));
        assert_eq!(solve_steps(&s), 1);
    }

    #[test]
    fn generation_is_deterministic_and_plot_count_seed_free() {
        for t in &generate_default_corpus(42).tasks {
            assert_eq!(initial_script(t, 9), initial_script(t, 9));
            assert_eq!(plot_count(&clean_script(t, 1)), plot_count(&clean_script(t, 2)));
        }
    }

    #[test]
    fn competence_one_and_zero() {
        let corpus = generate_default_corpus(42);
        let t = corpus
            .tasks
            .iter()
            .find(|t| t.fault_profile.injected_faults == vec![FailureClass::ConvFail])
            .unwrap();
        let s = initial_script(t, 0);
        let conv = sig(FailureClass::ConvFail);
        let req = RepairRequest {
            script: &s,
            sig: &conv,
            task: t,
            enrichment: None,
            attempt: 1,
            seed: 0,
        };
        let fixed = ScriptedModel::default().repair(&req).unwrap();
        assert!(execute_simulated(&fixed, t, 2).unwrap().success);

        let dumb = ScriptedModel::new(CompetenceTable::default().with(FailureClass::ConvFail, 0.0));
        let same = dumb.repair(&req).unwrap();
        let out = execute_simulated(&same, t, 2).unwrap();
        assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::ConvFail);
    }

    #[test]
    fn hard_geometry_is_never_repaired() {
        let corpus = generate_default_corpus(42);
        let t = corpus.task(8).unwrap();
        let model = ScriptedModel::new(CompetenceTable::default().with(FailureClass::HardGeom, 1.0));
        let hg = sig(FailureClass::HardGeom);
        let mesh = sig(FailureClass::MeshFail);
        let s = initial_script(t, 0);
        let s = model
            .repair(&RepairRequest { script: &s, sig: &mesh, task: t, enrichment: None, attempt: 1, seed: 0 })
            .unwrap();
        for attempt in 2..10 {
            let r = model
                .repair(&RepairRequest { script: &s, sig: &hg, task: t, enrichment: Some("docs"), attempt, seed: 3 })
                .unwrap();
            let out = execute_simulated(&r, t, attempt).unwrap();
            assert_eq!(extract_failure(&out.log).unwrap().class, FailureClass::HardGeom);
        }
    }

    #[test]
    fn repair_soundness_over_corpus_and_seeds() {
        let model = ScriptedModel::default();
        for seed in 0..5u64 {
            let corpus = generate_default_corpus(seed);
            for t in &corpus.tasks {
                let mut script = initial_script(t, seed);
                for attempt in 1..=4 {
                    let out = execute_simulated(&script, t, attempt).unwrap();
                    if out.success {
                        break;
                    }
                    let sg = extract_failure(&out.log).unwrap();
                    let next = model
                        .repair(&RepairRequest { script: &script, sig: &sg, task: t, enrichment: None, attempt, seed })
                        .unwrap();
                    if model.repair_succeeds(sg.class, t.case_id, attempt, seed) {
                        let after = execute_simulated(&next, t, attempt + 1).unwrap();
                        let again = (!after.success).then(|| extract_failure(&after.log).unwrap().class);
                        assert_ne!(again, Some(sg.class), "case {} seed {seed}", t.case_id);
                    }
                    script = next;
                }
            }
        }
    }

    #[test]
    fn seed_does_not_change_which_classes_are_correctable() {
        let m = ScriptedModel::new(CompetenceTable::default().with(FailureClass::MeshFail, 0.5));
        for seed in 0..50 {
            assert!(m.repair_succeeds(FailureClass::ConvFail, 1, 1, seed));
            assert!(!m.repair_succeeds(FailureClass::HardGeom, 1, 1, seed));
        }
        let hits = (0..200).filter(|s| m.repair_succeeds(FailureClass::MeshFail, 1, 1, *s)).count();
        assert!((60..140).contains(&hits), "{hits}");
    }
}
