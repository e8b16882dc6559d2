//! Benchmark task corpus: 50 analysis prompts with seeded fault profiles.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apdl::FailureClass;

pub const CORPUS_VERSION: u32 = 1;
pub const DEFAULT_TASK_COUNT: u32 = 50;
/// Case ids flagged as geometry-brittle in the default corpus.
pub const HARD_CASE_IDS: [u32; 3] = [8, 21, 35];

const STATIC_COUNT: u32 = 35;
const MODAL_COUNT: u32 = 10;
/// Share of non-hard tasks whose first-pass script carries a defect.
const FAULTED_SHARE: f64 = 0.30;
/// Share of injected faults (non-hard tasks) that the rule patcher can cure.
const RULE_RESOLVABLE_SHARE: f64 = 0.60;
const SINGLE_FAULT_PROBABILITY: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Static,
    Modal,
    Thermal,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Static, Category::Modal, Category::Thermal];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Static => "static",
            Category::Modal => "modal",
            Category::Thermal => "thermal",
        }
    }

    /// Fault classes a task of this category may be assigned.
    pub fn fault_pool(self) -> &'static [FailureClass] {
        match self {
            Category::Static => &[
                FailureClass::MeshFail,
                FailureClass::ConvFail,
                FailureClass::MissingResults,
            ],
            Category::Modal => &[FailureClass::MeshFail, FailureClass::MissingResults],
            Category::Thermal => &[FailureClass::ConvFail, FailureClass::ElemTypeFail],
        }
    }

    /// Element formulations the solver accepts for this analysis type.
    pub fn compatible_elements(self) -> &'static [&'static str] {
        match self {
            Category::Static | Category::Modal => &["SOLID185", "SOLID186", "BEAM188", "SHELL181"],
            Category::Thermal => &["SOLID70", "SOLID90"],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub magnitude: f64,
    /// `"N"` for forces, `"W/m2"` for heat flux.
    pub unit: String,
}

/// Geometry descriptor. No CAD kernel backs this; the simulator only reads
/// `mesh_size_mm` (the smallest element size the part meshes reliably with).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub shape: String,
    pub dimensions_mm: Vec<f64>,
    pub load: Option<Load>,
    pub mesh_size_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FaultProfile {
    pub injected_faults: Vec<FailureClass>,
    pub rule_resolvable: BTreeSet<FailureClass>,
    pub model_resolvable: BTreeSet<FailureClass>,
}

impl FaultProfile {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn is_clean(&self) -> bool {
        self.injected_faults.is_empty()
    }

    pub fn injects(&self, class: FailureClass) -> bool {
        self.injected_faults.contains(&class)
    }

    /// True when `class` is injected but deliberately out of reach of the
    /// deterministic rules (the first-pass script carries the rule-resistant
    /// variant of the defect).
    pub fn rule_resistant(&self, class: FailureClass) -> bool {
        self.injects(class) && !self.rule_resolvable.contains(&class)
    }

    pub fn check(&self, hard: bool) -> Result<(), String> {
        let injected: BTreeSet<_> = self.injected_faults.iter().copied().collect();
        if injected.len() != self.injected_faults.len() {
            return Err("injected_faults contains duplicates".into());
        }
        if !self.rule_resolvable.is_subset(&injected) {
            return Err("rule_resolvable is not a subset of injected_faults".into());
        }
        if !self.model_resolvable.is_subset(&injected) {
            return Err("model_resolvable is not a subset of injected_faults".into());
        }
        if hard
            && !injected
                .iter()
                .any(|f| !self.rule_resolvable.contains(f) && !self.model_resolvable.contains(f))
        {
            return Err("hard task has no unresolvable fault".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub case_id: u32,
    pub category: Category,
    pub prompt: String,
    pub geometry: Geometry,
    pub fault_profile: FaultProfile,
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub corpus_version: u32,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed corpus: {0}")]
    MalformedCorpus(String),
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Corpus {
    pub fn task(&self, case_id: u32) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.case_id == case_id)
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
        for t in &self.tasks {
            *counts.entry(t.category).or_default() += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.corpus_version != CORPUS_VERSION {
            return Err(CorpusError::MalformedCorpus(format!(
                "unsupported corpus_version {}",
                self.corpus_version
            )));
        }
        if self.tasks.is_empty() {
            return Err(CorpusError::MalformedCorpus("corpus has no tasks".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.case_id) {
                return Err(CorpusError::MalformedCorpus(format!(
                    "duplicate case_id {}",
                    t.case_id
                )));
            }
            if t.geometry.mesh_size_mm.is_nan() || t.geometry.mesh_size_mm <= 0.0 {
                return Err(CorpusError::MalformedCorpus(format!(
                    "case {}: mesh_size_mm must be positive",
                    t.case_id
                )));
            }
            t.fault_profile
                .check(t.hard)
                .map_err(|e| CorpusError::MalformedCorpus(format!("case {}: {e}", t.case_id)))?;
        }
        Ok(())
    }

    /// Non-fatal deviations from the default corpus shape.
    pub fn warnings(&self) -> Vec<String> {
        let counts = self.category_counts();
        let expected = [
            (Category::Static, STATIC_COUNT as usize),
            (Category::Modal, MODAL_COUNT as usize),
            (Category::Thermal, (DEFAULT_TASK_COUNT - STATIC_COUNT - MODAL_COUNT) as usize),
        ];
        expected
            .iter()
            .filter(|(c, n)| counts[c] != *n)
            .map(|(c, n)| format!("category {c}: {} tasks (default corpus has {n})", counts[c]))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        if text.trim().is_empty() {
            return Err(CorpusError::MalformedCorpus("empty document".into()));
        }
        let corpus: Corpus =
            serde_json::from_str(text).map_err(|e| CorpusError::MalformedCorpus(e.to_string()))?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    Corpus::from_json(&text)
}

fn category_for(case_id: u32) -> Category {
    if case_id <= STATIC_COUNT {
        Category::Static
    } else if case_id <= STATIC_COUNT + MODAL_COUNT {
        Category::Modal
    } else {
        Category::Thermal
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn geometry_for(category: Category, hard: bool, rng: &mut ChaCha8Rng) -> Geometry {
    let mesh_size_mm = *pick(rng, &[4.0, 8.0, 10.0, 12.0]);
    if hard {
        let (shape, dims) = match rng.random_range(0..3) {
            0 => ("pin_joint_plate", vec![100.0, 50.0, 10.0, 20.0]),
            1 => ("thin_wall_bracket", vec![120.0, 80.0, 1.5]),
            _ => ("thin_wall_tube", vec![60.0, 400.0, 1.2]),
        };
        return Geometry {
            shape: shape.into(),
            dimensions_mm: dims,
            load: Some(Load {
                magnitude: round_to(rng.random_range(1000.0..5000.0), 100.0),
                unit: "N".into(),
            }),
            mesh_size_mm,
        };
    }
    let (shape, dims) = match category {
        Category::Static => {
            let shape = *pick(
                rng,
                &["cantilever_beam", "plate", "bracket", "pressure_vessel", "bolted_assembly"],
            );
            let dims = match shape {
                "pressure_vessel" => vec![
                    round_to(rng.random_range(200.0..600.0), 10.0),
                    round_to(rng.random_range(400.0..1200.0), 10.0),
                    round_to(rng.random_range(8.0..20.0), 1.0),
                ],
                _ => vec![
                    round_to(rng.random_range(100.0..500.0), 10.0),
                    round_to(rng.random_range(20.0..100.0), 5.0),
                    round_to(rng.random_range(10.0..40.0), 5.0),
                ],
            };
            (shape, dims)
        }
        Category::Modal => {
            let shape = *pick(rng, &["cantilever_beam", "plate", "shaft"]);
            (
                shape,
                vec![
                    round_to(rng.random_range(200.0..800.0), 10.0),
                    round_to(rng.random_range(20.0..80.0), 5.0),
                    round_to(rng.random_range(10.0..30.0), 5.0),
                ],
            )
        }
        Category::Thermal => {
            let shape = *pick(rng, &["fin", "plate", "block"]);
            (
                shape,
                vec![
                    round_to(rng.random_range(50.0..300.0), 10.0),
                    round_to(rng.random_range(20.0..100.0), 5.0),
                    round_to(rng.random_range(5.0..30.0), 5.0),
                ],
            )
        }
    };
    let load = match category {
        Category::Static => Some(Load {
            magnitude: round_to(rng.random_range(200.0..10000.0), 50.0),
            unit: "N".into(),
        }),
        Category::Modal => None,
        Category::Thermal => Some(Load {
            magnitude: round_to(rng.random_range(1000.0..20000.0), 500.0),
            unit: "W/m2".into(),
        }),
    };
    Geometry {
        shape: shape.into(),
        dimensions_mm: dims,
        load,
        mesh_size_mm,
    }
}

fn prompt_for(category: Category, g: &Geometry) -> String {
    let shape = g.shape.replace('_', " ");
    let dims = g
        .dimensions_mm
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" x ");
    match category {
        Category::Static => format!(
            "Run a linear static structural analysis of a steel {shape} ({dims} mm) fixed at one end \
             under a {} N load at the free end. Plot the von Mises stress and the deformed shape.",
            g.load.as_ref().map(|l| l.magnitude).unwrap_or_default()
        ),
        Category::Modal => format!(
            "Run a modal analysis of a steel {shape} ({dims} mm) clamped at one end. Extract the \
             first three natural frequencies and plot the first two mode shapes."
        ),
        Category::Thermal => format!(
            "Run a steady-state thermal analysis of an aluminium {shape} ({dims} mm) held at 20 C on \
             one face with a heat flux of {} W/m2 on the opposite face. Plot the temperature field.",
            g.load.as_ref().map(|l| l.magnitude).unwrap_or_default()
        ),
    }
}

/// Builds the 50-task benchmark corpus. A pure function of `seed`.
pub fn generate_default_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tasks: Vec<TaskSpec> = (1..=DEFAULT_TASK_COUNT)
        .map(|case_id| {
            let category = category_for(case_id);
            let hard = HARD_CASE_IDS.contains(&case_id);
            let geometry = geometry_for(category, hard, &mut rng);
            TaskSpec {
                case_id,
                category,
                prompt: prompt_for(category, &geometry),
                geometry,
                fault_profile: FaultProfile::clean(),
                hard,
            }
        })
        .collect();

    for t in tasks.iter_mut().filter(|t| t.hard) {
        t.fault_profile = FaultProfile {
            injected_faults: vec![FailureClass::MeshFail, FailureClass::HardGeom],
            rule_resolvable: [FailureClass::MeshFail].into(),
            model_resolvable: [FailureClass::MeshFail].into(),
        };
    }

    let mut candidates: Vec<usize> = (0..tasks.len()).filter(|&i| !tasks[i].hard).collect();
    let faulted_count = (FAULTED_SHARE * candidates.len() as f64).round() as usize;
    candidates.shuffle(&mut rng);
    let mut faulted = candidates[..faulted_count].to_vec();
    faulted.sort_unstable();

    for &i in &faulted {
        let pool = tasks[i].category.fault_pool();
        let count = if rng.random_bool(SINGLE_FAULT_PROBABILITY) { 1 } else { 2 };
        let mut classes: Vec<FailureClass> = pool.to_vec();
        classes.shuffle(&mut rng);
        classes.truncate(count.min(pool.len()));
        classes.sort();
        let all: BTreeSet<_> = classes.iter().copied().collect();
        tasks[i].fault_profile = FaultProfile {
            injected_faults: classes,
            rule_resolvable: all.clone(),
            model_resolvable: all,
        };
    }

    // Only mesh and element-type defects have a rule-resistant variant.
    let total: usize = faulted
        .iter()
        .map(|&i| tasks[i].fault_profile.injected_faults.len())
        .sum();
    let resistant_target = total - (RULE_RESOLVABLE_SHARE * total as f64).round() as usize;
    let mut eligible: Vec<(usize, FailureClass)> = faulted
        .iter()
        .flat_map(|&i| {
            tasks[i]
                .fault_profile
                .injected_faults
                .iter()
                .filter(|c| matches!(c, FailureClass::MeshFail | FailureClass::ElemTypeFail))
                .map(move |c| (i, *c))
                .collect::<Vec<_>>()
        })
        .collect();
    eligible.shuffle(&mut rng);
    for (i, class) in eligible.into_iter().take(resistant_target) {
        tasks[i].fault_profile.rule_resolvable.remove(&class);
    }

    Corpus {
        corpus_version: CORPUS_VERSION,
        seed,
        tasks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_split_and_hard_cases() {
        let c = generate_default_corpus(42);
        assert_eq!(c.tasks.len(), 50);
        let counts = c.category_counts();
        assert_eq!(counts[&Category::Static], 35);
        assert_eq!(counts[&Category::Modal], 10);
        assert_eq!(counts[&Category::Thermal], 5);
        let hard: Vec<u32> = c.tasks.iter().filter(|t| t.hard).map(|t| t.case_id).collect();
        assert_eq!(hard, vec![8, 21, 35]);
        for id in hard {
            assert_eq!(c.task(id).unwrap().category, Category::Static);
        }
        assert!(c.warnings().is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_default_corpus(42).to_json(),
            generate_default_corpus(42).to_json()
        );
        assert_ne!(
            generate_default_corpus(42).to_json(),
            generate_default_corpus(43).to_json()
        );
    }

    #[test]
    fn faulted_share_and_resolvability() {
        let c = generate_default_corpus(42);
        let non_hard: Vec<_> = c.tasks.iter().filter(|t| !t.hard).collect();
        let faulted = non_hard.iter().filter(|t| !t.fault_profile.is_clean()).count();
        assert_eq!(faulted, 14);
        let mut injected = 0;
        let mut rule = 0;
        for t in &non_hard {
            let fp = &t.fault_profile;
            injected += fp.injected_faults.len();
            rule += fp.rule_resolvable.len();
            let all: BTreeSet<_> = fp.injected_faults.iter().copied().collect();
            assert_eq!(fp.model_resolvable, all);
            for f in &fp.injected_faults {
                assert!(t.category.fault_pool().contains(f));
            }
        }
        assert_eq!(rule, (0.6 * injected as f64).round() as usize);
    }

    #[test]
    fn load_rejects_duplicates_and_empty() {
        let mut c = generate_default_corpus(42);
        c.tasks[7].case_id = 7;
        let err = Corpus::from_json(&c.to_json()).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedCorpus(ref m) if m.contains("duplicate case_id 7")));
        assert!(matches!(Corpus::from_json(""), Err(CorpusError::MalformedCorpus(_))));
        assert!(matches!(Corpus::from_json("{}"), Err(CorpusError::MalformedCorpus(_))));
    }

    #[test]
    fn unknown_task_keys_are_rejected() {
        let c = generate_default_corpus(1);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["tasks"][0]["difficulty"] = serde_json::json!(3);
        assert!(Corpus::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn task_keys_and_category_spelling() {
        let c = generate_default_corpus(42);
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        let keys: BTreeSet<&str> = v["tasks"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            ["case_id", "category", "prompt", "geometry", "fault_profile", "hard"].into()
        );
        assert_eq!(v["tasks"][0]["category"], "static");
        assert_eq!(v["tasks"][49]["category"], "thermal");
        assert_eq!(v["corpus_version"], 1);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        let c = generate_default_corpus(42);
        c.save(&path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
    }

    #[test]
    fn category_count_mismatch_is_only_a_warning() {
        let mut c = generate_default_corpus(42);
        c.tasks.truncate(40);
        assert!(c.validate().is_ok());
        assert_eq!(c.warnings().len(), 2);
    }

    proptest! {
        #[test]
        fn profiles_satisfy_subset_invariants(seed in any::<u64>()) {
            let c = generate_default_corpus(seed);
            prop_assert!(c.validate().is_ok());
            prop_assert_eq!(c.tasks.iter().filter(|t| t.hard).count(), 3);
        }
    }
}
