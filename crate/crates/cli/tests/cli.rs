//! The `air` binary as a user sees it: exit codes, messages and files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn air(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_air"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AIR_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FAST: &[&str] = &["--iters", "2", "--num-synth", "20"];

fn run_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run"];
    v.extend_from_slice(FAST);
    v.extend_from_slice(extra);
    v
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = air(tmp.path(), &["run", "--config", "nowhere.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.json"), "{}", stderr(&o));
}

#[test]
fn schema_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"trainer": {"beta": "high"}}"#).unwrap();
    let o = air(tmp.path(), &["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainer.beta"), "{}", stderr(&o));
}

#[test]
fn invalid_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["sweep", "--param", "lambda", "--grid", "0,-1"],
        vec!["sweep", "--param", "num_synthetic", "--grid", "1.5"],
        vec!["sweep", "--param", "gamma"],
        vec!["sweep"],
        vec!["run", "--beta", "-2"],
        vec!["run", "--paradigm", "fsl"],
        vec!["report", "no-such-dir"],
    ] {
        let o = air(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn rerun_is_byte_identical_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let o = air(tmp.path(), &run_args(&["--out", "a"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = air(tmp.path(), &run_args(&["--out", "b"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["results.csv", "trace.json", "config.json", "pseudolabels.jsonl"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name} differs"
        );
    }
    let o = air(tmp.path(), &["report", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("a/report/summary.txt")).unwrap();
    assert!(summary.contains("rows: 1"));
}

#[test]
fn default_output_goes_under_runs_or_the_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = air(tmp.path(), &run_args(&[]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);

    let o = Command::new(env!("CARGO_BIN_EXE_air"))
        .args(run_args(&[]))
        .current_dir(tmp.path())
        .env("AIR_OUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("elsewhere").is_dir());
}

#[test]
fn corrupt_and_mixed_artifacts_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(air(tmp.path(), &run_args(&["--out", "a"])).status.code(), Some(0));
    assert_eq!(air(tmp.path(), &run_args(&["--out", "b", "--seed", "1"])).status.code(), Some(0));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");

    fs::copy(b.join("trace.json"), a.join("trace.json")).unwrap();
    let o = air(tmp.path(), &["report", "a"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    fs::write(b.join("trace.json"), b"\x00\x01garbage").unwrap();
    let o = air(tmp.path(), &["report", "b"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_cell_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--param", "lambda", "--grid", "0,0.25", "--seeds", "0,1", "--iters", "1", "--num-synth", "10", "--out",
        "s",
    ];
    let o = air(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("s");
    let csv = fs::read(dir.join("results.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(reader.records().count(), 4);

    let victim = fs::read_dir(dir.join("cells")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(victim).unwrap();
    let o = air(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 reused"));
    assert_eq!(fs::read(dir.join("results.csv")).unwrap(), csv);

    let o = air(tmp.path(), &["report", "s"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.join("report/accuracy_vs_lambda.svg").is_file());
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["kind"], "sweep");
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = air(tmp.path(), &["selftest"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(!out.contains("FAIL"));
}
