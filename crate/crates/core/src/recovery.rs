//! Recovery policies: the four deterministic rule patches, the escalation
//! ladder and per-strategy retry budgets.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::apdl::{ApdlCommand, ApdlScript, FailureClass, FailureSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    NoRecovery,
    RuleOnly,
    ModelOnly,
    FullLadder,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::NoRecovery,
        Policy::RuleOnly,
        Policy::ModelOnly,
        Policy::FullLadder,
    ];
    /// The three strategies compared by the default benchmark.
    pub const BENCHMARK: [Policy; 3] = [Policy::NoRecovery, Policy::RuleOnly, Policy::ModelOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::NoRecovery => "no_recovery",
            Policy::RuleOnly => "rule_only",
            Policy::ModelOnly => "model_only",
            Policy::FullLadder => "full_ladder",
        }
    }

    pub fn permits(self, level: LadderLevel) -> bool {
        match self {
            Policy::NoRecovery => false,
            Policy::RuleOnly => level == LadderLevel::L1RulePatch,
            Policy::ModelOnly => level == LadderLevel::L2ModelRegen,
            Policy::FullLadder => true,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy `{0}`")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub policy: Policy,
    /// Maximum solver execution attempts, the initial one included.
    pub budget_b: u32,
    pub max_react_iters: u32,
    pub forced_retries: u32,
    pub log_tool_enabled: bool,
    /// Rule patches wait for a (batch-mode auto-acknowledged) confirmation.
    pub rule_confirmation_required: bool,
    /// Every solver execution waits for a confirmation. Set for the two
    /// baseline strategies, which run rules-first with human fallback.
    pub execution_confirmation_required: bool,
}

impl StrategyConfig {
    pub fn for_policy(policy: Policy) -> Self {
        match policy {
            Policy::NoRecovery => Self {
                policy,
                budget_b: 1,
                max_react_iters: 2,
                forced_retries: 0,
                log_tool_enabled: false,
                rule_confirmation_required: false,
                execution_confirmation_required: true,
            },
            Policy::RuleOnly => Self {
                policy,
                budget_b: 2,
                max_react_iters: 12,
                forced_retries: 0,
                log_tool_enabled: false,
                rule_confirmation_required: true,
                execution_confirmation_required: true,
            },
            Policy::ModelOnly => Self {
                policy,
                budget_b: 4,
                max_react_iters: 12,
                forced_retries: 3,
                log_tool_enabled: true,
                rule_confirmation_required: false,
                execution_confirmation_required: false,
            },
            Policy::FullLadder => Self {
                policy,
                budget_b: 5,
                max_react_iters: 16,
                forced_retries: 0,
                log_tool_enabled: true,
                rule_confirmation_required: false,
                execution_confirmation_required: false,
            },
        }
    }
}

pub fn budget_for(policy: Policy) -> u32 {
    StrategyConfig::for_policy(policy).budget_b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LadderLevel {
    #[serde(rename = "L1_RulePatch")]
    L1RulePatch,
    #[serde(rename = "L2_ModelRegen")]
    L2ModelRegen,
    #[serde(rename = "L3_ContextEnrich")]
    L3ContextEnrich,
    #[serde(rename = "L4_Human")]
    L4Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostClass {
    Free,
    Cheap,
    Paid,
    Manual,
}

impl LadderLevel {
    pub const ALL: [LadderLevel; 4] = [
        LadderLevel::L1RulePatch,
        LadderLevel::L2ModelRegen,
        LadderLevel::L3ContextEnrich,
        LadderLevel::L4Human,
    ];

    pub fn cost_class(self) -> CostClass {
        match self {
            LadderLevel::L1RulePatch => CostClass::Free,
            LadderLevel::L2ModelRegen => CostClass::Cheap,
            LadderLevel::L3ContextEnrich => CostClass::Paid,
            LadderLevel::L4Human => CostClass::Manual,
        }
    }

    fn next(self) -> Option<LadderLevel> {
        match self {
            LadderLevel::L1RulePatch => Some(LadderLevel::L2ModelRegen),
            LadderLevel::L2ModelRegen => Some(LadderLevel::L3ContextEnrich),
            LadderLevel::L3ContextEnrich => Some(LadderLevel::L4Human),
            LadderLevel::L4Human => None,
        }
    }
}

/// Next recovery level after a failure. Single-level policies stay on their
/// level (the retry budget ends them); the full ladder climbs one rung per
/// failure and skips the rule patch when no rule matches the signature.
pub fn ladder_next(
    current: Option<LadderLevel>,
    sig: &FailureSignature,
    config: &StrategyConfig,
) -> Option<LadderLevel> {
    match config.policy {
        Policy::NoRecovery => None,
        Policy::RuleOnly => Some(LadderLevel::L1RulePatch),
        Policy::ModelOnly => Some(LadderLevel::L2ModelRegen),
        Policy::FullLadder => match current {
            None if RuleId::for_class(sig.class).is_none() => Some(LadderLevel::L2ModelRegen),
            None => Some(LadderLevel::L1RulePatch),
            Some(level) => level.next(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "R1_Mesh")]
    R1Mesh,
    #[serde(rename = "R2_Conv")]
    R2Conv,
    #[serde(rename = "R3_ElemType")]
    R3ElemType,
    #[serde(rename = "R4_SetLast")]
    R4SetLast,
}

impl RuleId {
    pub fn for_class(class: FailureClass) -> Option<RuleId> {
        match class {
            FailureClass::MeshFail => Some(RuleId::R1Mesh),
            FailureClass::ConvFail => Some(RuleId::R2Conv),
            FailureClass::ElemTypeFail => Some(RuleId::R3ElemType),
            FailureClass::MissingResults => Some(RuleId::R4SetLast),
            FailureClass::HardGeom | FailureClass::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchResult {
    pub patched: ApdlScript,
    pub rules_applied: Vec<RuleId>,
    pub changed: bool,
}

/// Default sub-step directive inserted by the convergence rule.
pub const NSUBST_DEFAULT: [&str; 3] = ["10", "100", "5"];

/// Structural/thermal element pairs swapped by the element-type rule.
const ELEMENT_SUBSTITUTIONS: [(&str, &str); 2] = [("SOLID185", "SOLID70"), ("SOLID186", "SOLID90")];

static INVALID_ELEMENT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^ELEMENT TYPE (\S+) IS INVALID FOR").unwrap());

fn substitute_element(name: &str) -> Option<&'static str> {
    ELEMENT_SUBSTITUTIONS.iter().find_map(|(a, b)| {
        if name.eq_ignore_ascii_case(a) {
            Some(*b)
        } else if name.eq_ignore_ascii_case(b) {
            Some(*a)
        } else {
            None
        }
    })
}

fn fmt_size(v: f64) -> String {
    format!("{v}")
}

fn patch_mesh(commands: &mut Vec<ApdlCommand>) {
    let mut last_esize = None;
    for (i, c) in commands.iter_mut().enumerate() {
        if c.is("ESIZE") {
            if let Some(size) = c.arg_f64(0) {
                c.args[0] = fmt_size(size * 2.0);
            }
            last_esize = Some(i);
        }
    }
    let has_free_mesh = commands.iter().any(|c| c.is("MSHKEY") && c.arg(0) == "0");
    if !has_free_mesh {
        let at = last_esize.map_or(0, |i| i + 1);
        commands.insert(at, ApdlCommand::new("MSHKEY", ["0"]));
    }
}

fn patch_convergence(commands: &mut Vec<ApdlCommand>) {
    let Some(solve) = commands.iter().position(|c| c.is("SOLVE")) else {
        return;
    };
    let autots = ApdlCommand::new("AUTOTS", ["ON"]);
    let nsubst = ApdlCommand::new("NSUBST", NSUBST_DEFAULT);
    let already = solve >= 2 && commands[solve - 2].same_as(&autots) && commands[solve - 1].same_as(&nsubst);
    if !already {
        commands.splice(solve..solve, [autots, nsubst]);
    }
}

fn patch_element_type(commands: &mut [ApdlCommand], sig: &FailureSignature) {
    let Some(invalid) = INVALID_ELEMENT_RE
        .captures(&sig.message)
        .map(|c| c[1].to_string())
    else {
        return;
    };
    for c in commands.iter_mut().filter(|c| c.is("ET")) {
        if c.arg(1).eq_ignore_ascii_case(&invalid) {
            if let Some(sub) = substitute_element(&invalid) {
                c.args[1] = sub.to_string();
            }
        }
    }
}

fn patch_set_last(commands: &mut [ApdlCommand]) {
    for c in commands.iter_mut().filter(|c| c.is("SET")) {
        if c.arg(0).parse::<f64>().is_ok() {
            c.args = vec!["LAST".to_string()];
        }
    }
}

/// Applies the single rule matching the failure class. Total: classes
/// without a rule return the script unchanged.
pub fn rule_patch(script: &ApdlScript, sig: &FailureSignature) -> PatchResult {
    let Some(rule) = RuleId::for_class(sig.class) else {
        return PatchResult {
            patched: script.clone(),
            rules_applied: Vec::new(),
            changed: false,
        };
    };
    let mut commands = script.commands.clone();
    match rule {
        RuleId::R1Mesh => patch_mesh(&mut commands),
        RuleId::R2Conv => patch_convergence(&mut commands),
        RuleId::R3ElemType => patch_element_type(&mut commands, sig),
        RuleId::R4SetLast => patch_set_last(&mut commands),
    }
    let candidate = ApdlScript::from_commands(commands);
    if candidate.same_commands(script) {
        PatchResult {
            patched: script.clone(),
            rules_applied: Vec::new(),
            changed: false,
        }
    } else {
        PatchResult {
            patched: candidate.normalized(),
            rules_applied: vec![rule],
            changed: true,
        }
    }
}
