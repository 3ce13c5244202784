//! End-to-end runs of the binary on the demo scenario.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use straggler_sim::io::{read_rows, read_structured};

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo")
}

fn run(args: &[&str]) -> Output {
    let d = demo();
    let f = |name: &str| d.join(name).display().to_string();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_straggler-sim"));
    cmd.args(&args[..1]);
    if args[0] != "decide" {
        cmd.args(["--trace", &f("trace.csv"), "--cluster", &f("cluster.json"), "--calib", &f("calib.json")]);
        cmd.args(["--perturb", &f("perturb.json")]);
    }
    cmd.args(&args[1..]).output().expect("binary runs")
}

#[test]
fn simulate_writes_one_row_per_job() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let o = run(&["simulate", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(std::fs::File::open(&out).unwrap()).unwrap();
    let ids: Vec<&str> = rows.iter().map(|r| r.job_id.as_str()).collect();
    assert_eq!(ids, ["resnet-ps", "bert-ar", "resnet-late"]);
    assert!(rows.iter().all(|r| r.seed == 7 && r.tta_s.is_some()));
}

#[test]
fn structured_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let o = run(&["simulate", "--timing", "overlap", "--format", "structured", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = read_structured(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(metrics.jobs.len(), 3);
    assert!(!metrics.iterations.is_empty());
    assert!(metrics.jobs.iter().filter(|j| j.job_id != "resnet-late").all(|j| j.policy.to_string() == "star-ml"));
}

#[test]
fn star_beats_ssgd_on_the_throttled_job() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp.csv");
    let o = run(&["compare", "--policies", "ssgd,star-h", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(std::fs::File::open(&out).unwrap()).unwrap();
    let tta = |policy: &str| {
        rows.iter().find(|r| r.job_id == "resnet-ps" && r.policy.to_string() == policy).and_then(|r| r.tta_s).unwrap()
    };
    assert!(tta("star-h") < tta("ssgd"));
}

#[test]
fn decide_prints_a_mode() {
    let snap = demo().join("snapshot.json");
    let o = run(&["decide", "--snapshot", snap.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "DynamicX[{0,1,2,3,4,5},{6,7}]");
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let o = run(&["compare", "--policies", "ssgd,ssgd", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "usage");

    let o = run(&["simulate", "--policy", "asgd", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "simulation");
    assert!(err["error"].as_str().unwrap().contains("bert-ar"));
}
