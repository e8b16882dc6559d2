//! Strategy summaries, pairwise comparisons and rendered reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{
    binomial_ci, cliffs_delta, effect_label, mann_whitney_u, prob_superiority, quartiles, EffectLabel, MwMode,
    Quartiles, EXACT_MAX_N,
};
use super::{ScoredRun, ScoringError};
use crate::corpus::Category;
use crate::recovery::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub n: usize,
    pub r: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Policy,
    pub n: usize,
    pub completed: usize,
    /// Completion rate R.
    pub r: f64,
    pub r_ci95: (f64, f64),
    /// Mean total score Q.
    pub q: f64,
    /// Zero-intervention rate Z.
    pub z: f64,
    pub per_type: BTreeMap<Category, TypeSummary>,
    pub quartiles: Quartiles,
    pub repeats: usize,
    /// Completion rate of each repeat, in repeat order.
    pub r_by_repeat: Vec<f64>,
    pub majority_case_rate: f64,
    pub failed_case_ids: Vec<u32>,
    /// Majority-failed cases per category.
    pub failure_distribution: BTreeMap<Category, usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Summarises all runs of one strategy.
pub fn aggregate(runs: &[ScoredRun], categories: &BTreeMap<u32, Category>) -> Result<StrategySummary, ScoringError> {
    let first = runs.first().ok_or(ScoringError::Empty)?;
    let strategy = first.strategy;
    let mut by_case: BTreeMap<u32, Vec<&ScoredRun>> = BTreeMap::new();
    for r in runs {
        if r.strategy != strategy {
            return Err(ScoringError::OutOfRange(format!("mixed strategies {strategy} and {}", r.strategy)));
        }
        by_case.entry(r.case_id).or_default().push(r);
    }
    let repeats = by_case.values().map(Vec::len).max().unwrap_or(0);
    for (&case_id, v) in &by_case {
        if v.len() != repeats {
            return Err(ScoringError::UnevenRepeats {
                case_id,
                strategy,
                found: v.len(),
                expected: repeats,
            });
        }
        if !categories.contains_key(&case_id) {
            return Err(ScoringError::UnknownCase(case_id));
        }
    }

    let n = runs.len();
    let completed = runs.iter().filter(|r| r.completed == 1).count();
    let qs: Vec<f64> = runs.iter().map(|r| f64::from(r.q)).collect();

    let mut per_type = BTreeMap::new();
    for cat in Category::ALL {
        let sel: Vec<&ScoredRun> = runs.iter().filter(|r| categories[&r.case_id] == cat).collect();
        if !sel.is_empty() {
            per_type.insert(
                cat,
                TypeSummary {
                    n: sel.len(),
                    r: mean(sel.iter().map(|r| f64::from(r.completed))),
                    q: mean(sel.iter().map(|r| f64::from(r.q))),
                },
            );
        }
    }

    let mut repeat_ids: Vec<u32> = runs.iter().map(|r| r.repeat).collect();
    repeat_ids.sort_unstable();
    repeat_ids.dedup();
    let r_by_repeat = repeat_ids
        .iter()
        .map(|&k| mean(runs.iter().filter(|r| r.repeat == k).map(|r| f64::from(r.completed))))
        .collect();

    let failed_case_ids: Vec<u32> = by_case
        .iter()
        .filter(|(_, v)| 2 * v.iter().filter(|r| r.completed == 1).count() <= v.len())
        .map(|(&id, _)| id)
        .collect();
    let mut failure_distribution: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for id in &failed_case_ids {
        *failure_distribution.get_mut(&categories[id]).expect("all categories present") += 1;
    }

    Ok(StrategySummary {
        strategy,
        n,
        completed,
        r: completed as f64 / n as f64,
        r_ci95: binomial_ci(completed as u64, n as u64, 0.95)?,
        q: mean(qs.iter().copied()),
        z: runs.iter().filter(|r| r.a == 3).count() as f64 / n as f64,
        per_type,
        quartiles: quartiles(&qs).expect("non-empty"),
        repeats,
        r_by_repeat,
        majority_case_rate: 1.0 - failed_case_ids.len() as f64 / by_case.len() as f64,
        failed_case_ids,
        failure_distribution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Q,
    T,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "q" => Ok(Metric::Q),
            "t" => Ok(Metric::T),
            other => Err(format!("unknown metric `{other}` (expected q or t)")),
        }
    }
}

fn metric_values(runs: &[ScoredRun], strategy: Policy, metric: Metric) -> Vec<f64> {
    runs.iter()
        .filter(|r| r.strategy == strategy)
        .map(|r| f64::from(match metric {
            Metric::Q => r.q,
            Metric::T => r.t,
        }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: Policy,
    pub b: Policy,
    pub metric: Metric,
    pub delta: f64,
    pub label: EffectLabel,
    pub prob_superiority: f64,
    pub u: f64,
    pub p_two_sided: f64,
    pub test: MwMode,
}

fn compare_samples(a: Policy, b: Policy, metric: Metric, x: &[f64], y: &[f64]) -> Result<PairwiseComparison, ScoringError> {
    let delta = cliffs_delta(x, y)?;
    let test = if x.len() + y.len() <= EXACT_MAX_N {
        MwMode::Exact
    } else {
        MwMode::NormalApprox
    };
    let mw = mann_whitney_u(x, y, test)?;
    Ok(PairwiseComparison {
        a,
        b,
        metric,
        delta,
        label: effect_label(delta),
        prob_superiority: prob_superiority(delta),
        u: mw.u,
        p_two_sided: mw.p_two_sided,
        test,
    })
}

/// Run-level comparison of strategy `a` against `b`.
pub fn compare_pair(runs: &[ScoredRun], a: Policy, b: Policy, metric: Metric) -> Result<PairwiseComparison, ScoringError> {
    compare_samples(a, b, metric, &metric_values(runs, a, metric), &metric_values(runs, b, metric))
}

fn per_task_means(runs: &[ScoredRun], strategy: Policy) -> Vec<f64> {
    let mut by_case: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.strategy == strategy) {
        by_case.entry(r.case_id).or_default().push(f64::from(r.q));
    }
    by_case.into_values().map(|v| mean(v.into_iter())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub tasks: usize,
    /// Fewer than two tasks: per-task comparisons are meaningless.
    pub insufficient_tasks: bool,
    pub run_level_ranking: Vec<Policy>,
    pub task_level_ranking: Vec<Policy>,
    pub task_level: Vec<PairwiseComparison>,
    pub ranking_matches: bool,
}

/// Ranks strategies by pairwise wins of Cliff's δ, ties broken by mean.
fn rank(samples: &[(Policy, Vec<f64>)]) -> Result<Vec<Policy>, ScoringError> {
    let mut scored = Vec::new();
    for (p, x) in samples {
        let mut wins = 0.0;
        for (o, y) in samples {
            if o != p {
                wins += f64::from(u8::from(cliffs_delta(x, y)? > 0.0));
            }
        }
        scored.push((*p, wins, mean(x.iter().copied())));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|s| s.0).collect())
}

/// Repeats the pairwise comparisons on per-task mean scores.
pub fn per_task_sensitivity(runs: &[ScoredRun], strategies: &[Policy]) -> Result<SensitivityReport, ScoringError> {
    let run_samples: Vec<(Policy, Vec<f64>)> = strategies
        .iter()
        .map(|&p| (p, metric_values(runs, p, Metric::Q)))
        .collect();
    let task_samples: Vec<(Policy, Vec<f64>)> = strategies.iter().map(|&p| (p, per_task_means(runs, p))).collect();
    let tasks = task_samples.iter().map(|(_, v)| v.len()).min().unwrap_or(0);
    if tasks < 2 || run_samples.iter().any(|(_, v)| v.is_empty()) {
        return Ok(SensitivityReport {
            tasks,
            insufficient_tasks: true,
            run_level_ranking: Vec::new(),
            task_level_ranking: Vec::new(),
            task_level: Vec::new(),
            ranking_matches: false,
        });
    }
    let mut task_level = Vec::new();
    for (i, (a, x)) in task_samples.iter().enumerate() {
        for (b, y) in &task_samples[i + 1..] {
            task_level.push(compare_samples(*a, *b, Metric::Q, x, y)?);
        }
    }
    let run_level_ranking = rank(&run_samples)?;
    let task_level_ranking = rank(&task_samples)?;
    Ok(SensitivityReport {
        tasks,
        insufficient_tasks: false,
        ranking_matches: run_level_ranking == task_level_ranking,
        run_level_ranking,
        task_level_ranking,
        task_level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub summaries: Vec<StrategySummary>,
    pub pairwise: Vec<PairwiseComparison>,
    pub sensitivity: SensitivityReport,
}

/// Builds the full report. Strategies appear in their canonical order;
/// pairwise rows compare each later strategy against each earlier one.
pub fn build_report(runs: &[ScoredRun], categories: &BTreeMap<u32, Category>) -> Result<BenchmarkReport, ScoringError> {
    if runs.is_empty() {
        return Err(ScoringError::Empty);
    }
    let strategies: Vec<Policy> = Policy::ALL
        .into_iter()
        .filter(|p| runs.iter().any(|r| r.strategy == *p))
        .collect();
    let mut summaries = Vec::new();
    for &p in &strategies {
        let sel: Vec<ScoredRun> = runs.iter().filter(|r| r.strategy == p).copied().collect();
        summaries.push(aggregate(&sel, categories)?);
    }
    let mut pairwise = Vec::new();
    for (i, &b) in strategies.iter().enumerate() {
        for &a in &strategies[i + 1..] {
            pairwise.push(compare_pair(runs, a, b, Metric::Q)?);
        }
    }
    Ok(BenchmarkReport {
        summaries,
        pairwise,
        sensitivity: per_task_sensitivity(runs, &strategies)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" => Ok(ReportFormat::Md),
            other => Err(format!("unknown report format `{other}` (expected csv, json or md)")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Md => "md",
        }
    }
}

pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Md => render_md(report),
    }
}

fn render_csv(report: &BenchmarkReport) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "strategy", "n", "completed", "r", "r_ci_lo", "r_ci_hi", "q", "z", "q_median", "q_iqr",
        "majority_case_rate", "failed_cases", "failed_static", "failed_modal", "failed_thermal",
    ])
    .expect("in-memory csv");
    for s in &report.summaries {
        let fd = |c| s.failure_distribution.get(&c).copied().unwrap_or(0).to_string();
        wtr.write_record([
            s.strategy.to_string(),
            s.n.to_string(),
            s.completed.to_string(),
            format!("{:.4}", s.r),
            format!("{:.4}", s.r_ci95.0),
            format!("{:.4}", s.r_ci95.1),
            format!("{:.4}", s.q),
            format!("{:.4}", s.z),
            format!("{:.2}", s.quartiles.median),
            format!("{:.2}", s.quartiles.iqr),
            format!("{:.4}", s.majority_case_rate),
            s.failed_case_ids.len().to_string(),
            fd(Category::Static),
            fd(Category::Modal),
            fd(Category::Thermal),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn render_md(report: &BenchmarkReport) -> String {
    let mut out = String::from("# Benchmark report\n\n## Overall results\n\n");
    out.push_str("| Strategy | N | R | 95% CI | Q | Z | Majority-case rate |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {:.3}–{:.3} | {:.4} | {:.4} | {:.4} |",
            s.strategy, s.n, s.r, s.r_ci95.0, s.r_ci95.1, s.q, s.z, s.majority_case_rate
        );
    }

    out.push_str("\n## Per-type breakdown\n\n| Strategy | Type | N | R | Q |\n|---|---|---|---|---|\n");
    for s in &report.summaries {
        for (cat, t) in &s.per_type {
            let _ = writeln!(out, "| {} | {} | {} | {:.4} | {:.4} |", s.strategy, cat, t.n, t.r, t.q);
        }
    }

    out.push_str("\n## Score quartiles\n\n| Strategy | Q1 | Median | Q3 | IQR |\n|---|---|---|---|---|\n");
    for s in &report.summaries {
        let q = &s.quartiles;
        let _ = writeln!(out, "| {} | {:.2} | {:.2} | {:.2} | {:.2} |", s.strategy, q.q1, q.median, q.q3, q.iqr);
    }

    out.push_str("\n## Failed-case distribution\n\n");
    out.push_str("| Strategy | Failed cases | Static | Modal | Thermal | Case ids |\n|---|---|---|---|---|---|\n");
    for s in &report.summaries {
        let fd = |c| s.failure_distribution.get(&c).copied().unwrap_or(0);
        let ids: Vec<String> = s.failed_case_ids.iter().map(u32::to_string).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            s.strategy,
            s.failed_case_ids.len(),
            fd(Category::Static),
            fd(Category::Modal),
            fd(Category::Thermal),
            ids.join(", ")
        );
    }

    out.push_str("\n## Pairwise comparisons (q)\n\n");
    out.push_str("| A vs B | Cliff's δ | Effect | P(A > B) | U | p (two-sided) | Test |\n|---|---|---|---|---|---|---|\n");
    for c in &report.pairwise {
        let _ = writeln!(
            out,
            "| {} vs {} | {:.4} | {:?} | {:.4} | {:.1} | {:.3e} | {:?} |",
            c.a, c.b, c.delta, c.label, c.prob_superiority, c.u, c.p_two_sided, c.test
        );
    }

    let s = &report.sensitivity;
    out.push_str("\n## Per-task sensitivity\n\n");
    if s.insufficient_tasks {
        let _ = writeln!(out, "Insufficient tasks for a per-task comparison ({}).", s.tasks);
    } else {
        let names = |v: &[Policy]| v.iter().map(Policy::to_string).collect::<Vec<_>>().join(" > ");
        let _ = writeln!(out, "- tasks: {}", s.tasks);
        let _ = writeln!(out, "- run-level ranking: {}", names(&s.run_level_ranking));
        let _ = writeln!(out, "- per-task ranking: {}", names(&s.task_level_ranking));
        let _ = writeln!(out, "- rankings match: {}", s.ranking_matches);
        for c in &s.task_level {
            let _ = writeln!(out, "- {} vs {}: δ = {:.4} ({:?}), p = {:.3e}", c.a, c.b, c.delta, c.label, c.p_two_sided);
        }
    }
    out
}
