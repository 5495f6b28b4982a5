use std::path::Path;
use std::process::{Command, Output};

use g2_cli::{EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use serde_json::Value;

fn g2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2")).args(args).env_remove("G2_JOBS").output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    g2(args).status.code().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL_TRAIN: [&str; 6] = ["--nodes", "60", "--epochs", "15", "--patience", "5"];

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&[]), EXIT_USAGE);
    assert_eq!(code(&["energy", "--model", "gin"]), EXIT_USAGE);
    assert_eq!(code(&["energy", "--model", "gcn", "--layers", "0"]), EXIT_USAGE);
    assert_eq!(code(&["stability", "--p", "-1"]), EXIT_USAGE);
    assert_eq!(code(&["stability", "--p", "0", "--graph", "star:5"]), EXIT_USAGE);
    assert_eq!(code(&["--jobs", "0", "gradcheck", "--model", "linear"]), EXIT_USAGE);
    assert_eq!(code(&["ablate", "--axis", "fhat", "--points", "1"]), EXIT_USAGE);
    assert_eq!(code(&["homophily", "--h", "1.5"]), EXIT_USAGE);
    assert_eq!(code(&["stability", "--p", "0", "--epsilon", "0.5"]), EXIT_USAGE);
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("two.txt");
    std::fs::write(&edges, "0 1\n1 2\n2 0\n3 4\n4 5\n5 3\n").unwrap();
    let spec = format!("edges:{}", edges.display());
    assert_eq!(code(&["stability", "--p", "0", "--graph", &spec]), EXIT_RUNTIME);
    assert_eq!(code(&["stability", "--p", "0", "--graph", "edges:/nonexistent/file"]), EXIT_RUNTIME);
    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "not json\n").unwrap();
    assert_eq!(code(&["replay", "--records", junk.to_str().unwrap()]), EXIT_RUNTIME);
}

#[test]
fn energy_writes_one_row_per_layer() {
    let out = g2(&["energy", "--model", "g2-gcn", "--layers", "5", "--grid-side", "4"]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,dirichlet");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("5,"));
    let summary: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(summary["config"]["layers"], 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mad.csv");
    let out = g2(&["energy", "--model", "gcn", "--layers", "3", "--metric", "mad", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert_eq!(stdout_json(&out)["metric"], "mad");
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("layer,mad\n"));
}

#[test]
fn stability_writes_series_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, fit) = (dir.path().join("e.csv"), dir.path().join("fit.json"));
    let out = g2(&[
        "stability",
        "--p",
        "0",
        "--horizon",
        "5",
        "--out",
        csv.to_str().unwrap(),
        "--fit-out",
        fit.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let summary = stdout_json(&out);
    assert_eq!(summary["envelope"]["holds"], true);
    assert_eq!(summary["clamp_drift"], 0.0);
    assert_eq!(std::fs::read(&fit).unwrap(), out.stdout);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("t,energy\n0.0,"));
}

#[test]
fn gradcheck_exit_code_tracks_the_verdict() {
    let out = g2(&["gradcheck", "--model", "g2-sage", "--p", "1", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let v = stdout_json(&out);
    assert_eq!(v["pass"], true);
    assert!(v["checked"].as_u64().unwrap() > 0);
    assert_eq!(code(&["gradcheck", "--model", "g2-gcn", "--tol", "1e-15"]), EXIT_CHECK_FAILED);
    assert_eq!(code(&["gradcheck", "--model", "linear"]), EXIT_OK);
}

fn write_records(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("depth.jsonl");
    let mut args = vec!["depth", "--layers", "2,3", "--seeds", "2", "--lr", "5e-3,1e-2", "--out", path.to_str().unwrap()];
    args.extend_from_slice(&SMALL_TRAIN);
    assert_eq!(code(&args), EXIT_OK);
    path
}

#[test]
fn records_replay_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_records(dir.path());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2 * 2 * 2);
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["experiment"], "depth");
        assert_eq!(rec["candidates"], 2);
        assert!(rec.get("wall_time_ms").is_none());
    }
    let out = g2(&["replay", "--records", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert_eq!(stdout_json(&out), serde_json::json!({"replayed": 8, "matched": 8}));

    let mut first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let m = first["metrics"]["test_metric"].as_f64().unwrap();
    first["metrics"]["test_metric"] = (m + 1e-9).into();
    let tampered = dir.path().join("tampered.jsonl");
    std::fs::write(&tampered, serde_json::to_string(&first).unwrap() + "\n").unwrap();
    assert_eq!(code(&["replay", "--records", tampered.to_str().unwrap()]), EXIT_CHECK_FAILED);
}

#[test]
fn worker_count_does_not_change_records() {
    let mut base = vec!["homophily", "--h", "0.2,0.8", "--lr", "5e-3", "--p", "1,2"];
    base.extend_from_slice(&SMALL_TRAIN);
    let serial = g2(&base);
    let mut par = vec!["--jobs", "3"];
    par.extend_from_slice(&base);
    let parallel = g2(&par);
    assert_eq!(serial.status.code(), Some(EXIT_OK));
    assert_eq!(serial.stdout, parallel.stdout);

    let mut timed = vec!["--timing"];
    timed.extend_from_slice(&base);
    let out = g2(&timed);
    let rec: Value = serde_json::from_str(std::str::from_utf8(&out.stdout).unwrap().lines().next().unwrap()).unwrap();
    assert!(rec["wall_time_ms"].is_number());
}
