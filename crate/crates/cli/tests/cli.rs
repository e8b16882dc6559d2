use std::path::Path;
use std::process::Command;

use apdl_bench::run_cli;
use apdl_harness::corpus::generate_default_corpus;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["apdl-bench"];
    full.extend_from_slice(args);
    let code = run_cli(full, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn small_corpus(dir: &Path) -> String {
    let mut corpus = generate_default_corpus(42);
    corpus.tasks.retain(|t| [1, 8, 36].contains(&t.case_id));
    let path = dir.join("small.json");
    corpus.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_run(dir: &Path) -> String {
    let corpus = small_corpus(dir);
    let out = dir.join("out");
    let (code, stdout, stderr) = cli(&[
        "run",
        "--corpus",
        &corpus,
        "--repeats",
        "2",
        "--out",
        out.to_str().unwrap(),
        "--fixed-clock",
        "0",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.starts_with("18 case-runs"));
    out.to_str().unwrap().to_string()
}

#[test]
fn unknown_strategy_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, _, err) = cli(&["run", "--strategies", "no_recovery,magic", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("magic"));
    assert!(!out.exists());
}

#[test]
fn zero_repeats_and_bad_corpus_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, _, _) = cli(&["run", "--repeats", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"tasks\": 3}").unwrap();
    let (code, _, _) = cli(&["run", "--corpus", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn run_then_report_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());
    for (fmt, probe) in [("md", "## Overall results"), ("csv", "strategy"), ("json", "\"summaries\"")] {
        let (code, text, err) = cli(&["report", "--runs", &out, "--format", fmt]);
        assert_eq!(code, 0, "{err}");
        assert!(text.contains(probe), "{fmt}: {text}");
        assert!(Path::new(&out).join(format!("report.{fmt}")).exists());
    }
}

#[test]
fn report_on_empty_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&["report", "--runs", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("scored_runs.csv"));
}

#[test]
fn stats_compares_a_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());
    let (code, text, err) = cli(&["stats", "--runs", &out, "--pair", "model_only:no_recovery", "--metric", "t"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["a"], "model_only");
    assert!(v["delta"].as_f64().unwrap() >= 0.0);
    let (code, _, _) = cli(&["stats", "--runs", &out, "--pair", "model_only"]);
    assert_eq!(code, 2);
}

#[test]
fn rater_sheet_scoring_and_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut sheet = String::from("case_id,strategy,repeat,rater,t\n");
    let mut expected = Vec::new();
    for case in [1, 8, 36] {
        for s in ["no_recovery", "rule_only", "model_only"] {
            let (a, b) = if case == 8 { (2, 2) } else { (4, 3) };
            sheet.push_str(&format!("{case},{s},0,r1,{a}\n{case},{s},0,r2,{b}\n"));
            expected.push(if case == 8 { "2" } else { "4" });
        }
    }
    let sheet_path = dir.path().join("sheet.csv");
    std::fs::write(&sheet_path, sheet).unwrap();

    let (code, text, err) = cli(&["agreement", "--sheet", sheet_path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let a: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(a["pairs"], 9);
    assert_eq!(a["within_one_point"], 1.0);

    let out = dir.path().join("rated");
    let (code, _, err) = cli(&[
        "run",
        "--corpus",
        &corpus,
        "--repeats",
        "1",
        "--rater-sheet",
        sheet_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("scored_runs.csv")).unwrap();
    // Consensus of 4 and 3 rounds half away from zero.
    let t: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    let mut want = expected.clone();
    want.sort();
    let mut got = t.clone();
    got.sort();
    assert_eq!(got, want, "{csv}");

    let (code, _, _) = cli(&[
        "run",
        "--oracle-scorer",
        "--rater-sheet",
        sheet_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn corpus_command_writes_default_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let (code, text, _) = cli(&["corpus", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(text.starts_with("50 tasks"));
    let loaded = apdl_harness::corpus::load_corpus(&path).unwrap();
    assert_eq!(loaded, generate_default_corpus(42));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_apdl-bench");
    let status = Command::new(bin).args(["run", "--strategies", "nope", "--out", "/nonexistent/x"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin).arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
}
