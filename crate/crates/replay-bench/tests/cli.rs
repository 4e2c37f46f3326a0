//! End-to-end checks of the `replay-bench` binary: exit codes, report
//! determinism, and the gen/report subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_replay-bench");

fn run_bin(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic source: three classes, two sub-populations each,
/// separated enough that clustering is unambiguous.
fn write_blobs(dir: &Path) -> PathBuf {
    let path = dir.join("blobs.txt");
    fs::write(
        &path,
        "dim = 2\n\
         blob = class=0 sub=0 count=45 var=0.005 mean=0.2,0.8\n\
         blob = class=0 sub=1 count=15 var=0.005 mean=0.8,0.2\n\
         blob = class=1 sub=2 count=40 var=0.005 mean=0.5,0.9\n\
         blob = class=1 sub=3 count=20 var=0.005 mean=0.9,0.5\n\
         blob = class=2 sub=4 count=35 var=0.005 mean=0.1,0.1\n\
         blob = class=2 sub=5 count=25 var=0.005 mean=0.6,0.6\n",
    )
    .unwrap();
    path
}

fn write_config(dir: &Path, blobs: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(
        &path,
        format!(
            "dataset = {}\n\
             scenario = omniscient\n\
             policy = dcbrs\n\
             memory_size = 30\n\
             batch_size = 10\n\
             replay_steps = 2\n\
             retention = 0.5,1.0\n\
             runs = 2\n\
             seed = 11\n\
             {extra}",
            blobs.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(exit_code(&run_bin(&["--help"])), 0);
    assert_eq!(exit_code(&run_bin(&["run", "--help"])), 0);
    assert_eq!(exit_code(&run_bin(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let out = run_bin(&["run", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 1);
    let out = run_bin(&["frobnicate"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = write_blobs(dir.path());
    let out = run_bin(&[
        "run",
        "--dataset",
        blobs.to_str().unwrap(),
        "--memory-size",
        "0",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("memory_size"), "stderr: {}", stderr(&out));

    // Scenario-dependent validation: base must not carry a merge target.
    let out = run_bin(&[
        "run",
        "--dataset",
        blobs.to_str().unwrap(),
        "--scenario",
        "base",
        "--merge-target",
        "2",
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn missing_dataset_exits_three() {
    let out = run_bin(&["run", "--dataset", "/no/such/path", "--out", "/tmp/unused.json"]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn empty_stream_exits_two() {
    // Classes of ~20 instances with retention 0.01 each round to zero
    // retained instances, which is a runtime failure, not a config one.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.txt");
    fs::write(
        &path,
        "dim = 1\n\
         blob = class=0 sub=0 count=20 var=0.001 mean=0.3\n\
         blob = class=1 sub=1 count=20 var=0.001 mean=0.7\n",
    )
    .unwrap();
    let out = run_bin(&[
        "run",
        "--dataset",
        path.to_str().unwrap(),
        "--scenario",
        "base",
        "--policy",
        "reservoir",
        "--retention",
        "0.01",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn zero_timing_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = write_blobs(dir.path());
    let cfg = write_config(dir.path(), &blobs, "zero_timing = true\n");
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out_path = dir.path().join(name);
        let out = run_bin(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(stdout.contains("mean accuracy"), "stdout: {stdout}");
        outputs.push(fs::read(&out_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "reports differ byte-for-byte");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = write_blobs(dir.path());
    let cfg = write_config(dir.path(), &blobs, "");
    let out_path = dir.path().join("r.json");
    let out = run_bin(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--memory-size",
        "24",
        "--policy",
        "cbrs",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["config"]["memory_size"], 24);
    assert_eq!(report["config"]["policy"], "cbrs");
    assert_eq!(report["policy_label"], "cbrs");
}

#[test]
fn gen_writes_manifest_and_dataset_csv() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = write_blobs(dir.path());
    let cfg = write_config(dir.path(), &blobs, "");
    let out_dir = dir.path().join("m");
    let out = run_bin(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--run-index",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run_index"], 1);
    let total = manifest["total_instances"].as_u64().unwrap();
    let batch_total: u64 = manifest["batches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["size"].as_u64().unwrap())
        .sum();
    assert_eq!(total, batch_total);
    let csv = fs::read_to_string(out_dir.join("dataset.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,label,sub_label"));
    assert_eq!(lines.count() as u64, total);
}

#[test]
fn report_combines_runs_into_csv() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = write_blobs(dir.path());
    let cfg = write_config(dir.path(), &blobs, "zero_timing = true\n");
    let mut inputs = Vec::new();
    for policy in ["reservoir", "cbrs"] {
        let out_path = dir.path().join(format!("{policy}.json"));
        let out = run_bin(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--policy",
            policy,
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        inputs.push(out_path);
    }
    let combined = dir.path().join("combined.csv");
    let out = run_bin(&[
        "report",
        "--out",
        combined.to_str().unwrap(),
        inputs[0].to_str().unwrap(),
        inputs[1].to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = fs::read_to_string(&combined).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("kind,scenario,policy"));
    // Two reports, two runs each: 2 x (2 run rows + 1 aggregate row).
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert_eq!(text.matches("aggregate").count(), 2);

    // Tampered inputs are rejected: aggregates must be recomputable.
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&inputs[0]).unwrap()).unwrap();
    doc["mean_accuracy"] = serde_json::json!(0.999);
    fs::write(&inputs[0], serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run_bin(&[
        "report",
        "--out",
        combined.to_str().unwrap(),
        inputs[0].to_str().unwrap(),
    ]);
    assert_ne!(exit_code(&out), 0);
}
