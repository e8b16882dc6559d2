//! Per-run scores, scored-run CSV files and rater sheets.
//!
//! Each run gets q = t + a + e: task completion t (0..4, from an oracle or
//! human raters), autonomy a (0..3, from the trace) and recovery efficiency
//! e (0..3, from retries and outcome).

pub mod report;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::trace::{EventKind, TraceEvent};
use crate::orchestrator::CaseRunRecord;
use crate::recovery::Policy;

pub const SCORED_RUN_HEADER: &str = "case_id,strategy,repeat,completed,t,a,e,q,retries,intervention";
pub const RATER_SHEET_HEADER: &str = "case_id,strategy,repeat,rater,t";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("trace has no terminal Stopped event")]
    IncompleteTrace,
    #[error("score out of range: {0}")]
    OutOfRange(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected csv header `{found}`, expected `{expected}`")]
    BadHeader { found: String, expected: String },
    #[error("duplicate row for {0}")]
    DuplicateRow(String),
    #[error("case {case_id} under {strategy} has {found} repeats, expected {expected}")]
    UnevenRepeats {
        case_id: u32,
        strategy: Policy,
        found: usize,
        expected: usize,
    },
    #[error("no scored runs")]
    Empty,
    #[error("case {0} is not in the corpus")]
    UnknownCase(u32),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

/// One row of the scored-run CSV. `completed` and `intervention` are 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredRun {
    pub case_id: u32,
    pub strategy: Policy,
    pub repeat: u32,
    pub completed: u8,
    pub t: u8,
    pub a: u8,
    pub e: u8,
    pub q: u8,
    pub retries: u32,
    pub intervention: u8,
}

impl ScoredRun {
    pub fn new(record: &CaseRunRecord, t: u8, a: u8) -> Result<Self, ScoringError> {
        if t > 4 || a > 3 {
            return Err(ScoringError::OutOfRange(format!("t={t} a={a}")));
        }
        let e = efficiency_score(record.retries, record.completed);
        Ok(Self {
            case_id: record.case_id,
            strategy: record.strategy,
            repeat: record.repeat_index,
            completed: record.completed,
            t,
            a,
            e,
            q: t + a + e,
            retries: record.retries,
            intervention: u8::from(record.intervention_required),
        })
    }

    pub fn key(&self) -> (u32, Policy, u32) {
        (self.case_id, self.strategy, self.repeat)
    }
}

/// 3 fully autonomous, 2 auto-acknowledged confirmations, 1 context
/// enrichment needed, 0 escalated or intervention required.
pub fn autonomy_score(trace: &[TraceEvent]) -> Result<u8, ScoringError> {
    let stopped = trace
        .iter()
        .rev()
        .find(|e| e.event == EventKind::Stopped)
        .ok_or(ScoringError::IncompleteTrace)?;
    let has = |k: EventKind| trace.iter().any(|e| e.event == k);
    let escalated = has(EventKind::Escalated) || stopped.payload["status"] == "Escalated";
    let intervention = stopped.payload["intervention_required"].as_bool().unwrap_or(true);
    Ok(if escalated || intervention {
        0
    } else if has(EventKind::ContextEnriched) {
        1
    } else if has(EventKind::ConfirmationRequested) {
        2
    } else {
        3
    })
}

pub fn efficiency_score(retries: u32, completed: u8) -> u8 {
    match (completed, retries) {
        (0, _) => 0,
        (_, 0) => 3,
        (_, 1) => 2,
        _ => 1,
    }
}

/// Oracle task-completion score: 4 for a success with the expected number
/// of result images, 2 for a success with a different count, 0 otherwise.
pub fn oracle_t(record: &CaseRunRecord, expected_images: usize) -> u8 {
    match (record.completed, record.images == expected_images) {
        (0, _) => 0,
        (_, true) => 4,
        (_, false) => 2,
    }
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &str) -> Result<(), ScoringError> {
    let found = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(ScoringError::BadHeader {
            found,
            expected: expected.into(),
        });
    }
    Ok(())
}

/// Writes rows sorted by (case, strategy, repeat).
pub fn write_scored_runs<W: Write>(w: W, runs: &[ScoredRun]) -> Result<(), ScoringError> {
    let mut rows = runs.to_vec();
    rows.sort_by_key(ScoredRun::key);
    let mut wtr = csv::Writer::from_writer(w);
    for r in &rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record(SCORED_RUN_HEADER.split(','))?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn scored_runs_to_csv(runs: &[ScoredRun]) -> String {
    let mut buf = Vec::new();
    write_scored_runs(&mut buf, runs).expect("in-memory csv write");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_scored_runs<R: Read>(r: R) -> Result<Vec<ScoredRun>, ScoringError> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, SCORED_RUN_HEADER)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let run: ScoredRun = row?;
        if run.q != run.t + run.a + run.e || run.t > 4 || run.a > 3 || run.e > 3 {
            return Err(ScoringError::OutOfRange(format!("{run:?}")));
        }
        if !seen.insert(run.key()) {
            return Err(ScoringError::DuplicateRow(format!("{:?}", run.key())));
        }
        out.push(run);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterRow {
    pub case_id: u32,
    pub strategy: Policy,
    pub repeat: u32,
    pub rater: String,
    pub t: u8,
}

/// Human task-completion ratings, one row per (run, rater).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RaterSheet {
    pub rows: Vec<RaterRow>,
}

impl RaterSheet {
    pub fn read<R: Read>(r: R) -> Result<Self, ScoringError> {
        let mut rdr = csv::Reader::from_reader(r);
        check_header(&mut rdr, RATER_SHEET_HEADER)?;
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        for row in rdr.deserialize() {
            let row: RaterRow = row?;
            if row.t > 4 {
                return Err(ScoringError::OutOfRange(format!("t={} for case {}", row.t, row.case_id)));
            }
            let key = (row.case_id, row.strategy, row.repeat, row.rater.clone());
            if !seen.insert(key.clone()) {
                return Err(ScoringError::DuplicateRow(format!("{key:?}")));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    fn by_run(&self) -> BTreeMap<(u32, Policy, u32), BTreeMap<&str, u8>> {
        let mut m: BTreeMap<_, BTreeMap<&str, u8>> = BTreeMap::new();
        for r in &self.rows {
            m.entry((r.case_id, r.strategy, r.repeat))
                .or_default()
                .insert(r.rater.as_str(), r.t);
        }
        m
    }

    /// Consensus t for a run: the rounded mean over its raters.
    pub fn consensus_t(&self, case_id: u32, strategy: Policy, repeat: u32) -> Option<u8> {
        let runs = self.by_run();
        let ratings = runs.get(&(case_id, strategy, repeat))?;
        let mean = ratings.values().map(|&t| f64::from(t)).sum::<f64>() / ratings.len() as f64;
        Some(mean.round() as u8)
    }

    /// Rating pairs of the first two raters (by id) for every run both rated.
    pub fn rater_pairs(&self) -> Vec<(u8, u8)> {
        let raters: BTreeSet<&str> = self.rows.iter().map(|r| r.rater.as_str()).collect();
        let mut ids = raters.into_iter();
        let (Some(a), Some(b)) = (ids.next(), ids.next()) else {
            return Vec::new();
        };
        self.by_run()
            .values()
            .filter_map(|m| Some((*m.get(a)?, *m.get(b)?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pairs: usize,
    pub weighted_kappa: f64,
    pub within_one_point: f64,
}

pub fn agreement(sheet: &RaterSheet) -> Result<Agreement, ScoringError> {
    let pairs = sheet.rater_pairs();
    let weighted_kappa = stats::weighted_kappa(&pairs)?;
    Ok(Agreement {
        pairs: pairs.len(),
        weighted_kappa,
        within_one_point: stats::within_one_point_rate(&pairs).unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ev(event: EventKind, payload: serde_json::Value) -> TraceEvent {
        TraceEvent {
            run_id: "r".into(),
            case_id: 1,
            strategy: Policy::ModelOnly,
            seed: 0,
            seq: 1,
            event,
            payload,
            wall_time: 0,
        }
    }

    fn stopped(status: &str) -> TraceEvent {
        ev(
            EventKind::Stopped,
            json!({ "status": status, "intervention_required": status != "Succeeded" }),
        )
    }

    #[test]
    fn autonomy_mapping() {
        assert_eq!(autonomy_score(&[stopped("Succeeded")]).unwrap(), 3);
        let confirm = ev(EventKind::ConfirmationRequested, json!({}));
        assert_eq!(autonomy_score(&[confirm.clone(), stopped("Succeeded")]).unwrap(), 2);
        let enrich = ev(EventKind::ContextEnriched, json!({}));
        assert_eq!(autonomy_score(&[confirm, enrich, stopped("Succeeded")]).unwrap(), 1);
        let esc = ev(EventKind::Escalated, json!({}));
        assert_eq!(autonomy_score(&[esc, stopped("Escalated")]).unwrap(), 0);
        assert_eq!(autonomy_score(&[stopped("Failed")]).unwrap(), 0);
        assert!(matches!(autonomy_score(&[]), Err(ScoringError::IncompleteTrace)));
    }

    #[test]
    fn efficiency_mapping() {
        assert_eq!(efficiency_score(0, 1), 3);
        assert_eq!(efficiency_score(1, 1), 2);
        assert_eq!(efficiency_score(2, 1), 1);
        assert_eq!(efficiency_score(5, 0), 0);
    }

    fn record(completed: u8, images: usize, retries: u32) -> CaseRunRecord {
        CaseRunRecord {
            case_id: 4,
            strategy: Policy::RuleOnly,
            repeat_index: 2,
            completed,
            retries,
            intervention_required: completed == 0,
            images,
            trace_ref: "traces/x.jsonl".into(),
            token_estimate: 10,
        }
    }

    #[test]
    fn oracle_and_closure() {
        assert_eq!(oracle_t(&record(1, 2, 0), 2), 4);
        assert_eq!(oracle_t(&record(1, 1, 0), 2), 2);
        assert_eq!(oracle_t(&record(0, 0, 1), 2), 0);
        let s = ScoredRun::new(&record(1, 2, 1), 4, 2).unwrap();
        assert_eq!((s.e, s.q), (2, 8));
        assert!(ScoredRun::new(&record(1, 2, 1), 5, 2).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![
            ScoredRun::new(&record(1, 2, 1), 4, 2).unwrap(),
            ScoredRun::new(&record(0, 0, 0), 0, 0).unwrap(),
        ];
        let mut rows = rows;
        rows[1].case_id = 1;
        let text = scored_runs_to_csv(&rows);
        assert_eq!(text.lines().next().unwrap(), SCORED_RUN_HEADER);
        assert!(text.lines().nth(1).unwrap().starts_with("1,rule_only,2,0"));
        let back = read_scored_runs(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].case_id, 1);
        assert!(matches!(
            read_scored_runs("a,b\n1,2\n".as_bytes()),
            Err(ScoringError::BadHeader { .. })
        ));
        assert_eq!(scored_runs_to_csv(&[]).trim_end(), SCORED_RUN_HEADER);
    }

    #[test]
    fn rater_sheet_pairs_and_agreement() {
        let text = "case_id,strategy,repeat,rater,t\n\
                    1,model_only,0,r1,4\n1,model_only,0,r2,4\n\
                    2,model_only,0,r1,0\n2,model_only,0,r2,1\n\
                    3,rule_only,1,r1,2\n3,rule_only,1,r2,4\n";
        let sheet = RaterSheet::read(text.as_bytes()).unwrap();
        assert_eq!(sheet.rater_pairs(), vec![(4, 4), (0, 1), (2, 4)]);
        assert_eq!(sheet.consensus_t(3, Policy::RuleOnly, 1), Some(3));
        let a = agreement(&sheet).unwrap();
        assert!((a.within_one_point - 2.0 / 3.0).abs() < 1e-12);
        let dup = format!("{text}1,model_only,0,r1,3\n");
        assert!(matches!(RaterSheet::read(dup.as_bytes()), Err(ScoringError::DuplicateRow(_))));
        let bad = "case_id,strategy,repeat,rater,t\n1,model_only,0,r1,9\n";
        assert!(RaterSheet::read(bad.as_bytes()).is_err());
    }
}
