use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn vcc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcc"))
        .current_dir(dir)
        .env_remove("VCC_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout {}\nstderr {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Exit code and the parsed stderr error record.
fn failure(out: &Output) -> (i32, Value) {
    let code = out.status.code().expect("exited");
    let record = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)));
    (code, record)
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn metrics_on_hand_written_graph() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixture("two_layer_vcc.json");
    let v = ok(&vcc(dir.path(), &["metrics", "--vcc", g.to_str().unwrap()]));
    let m = v.as_array().unwrap();
    let field = |i: usize, k: &str| m[i][k].as_f64().unwrap();
    assert_eq!(m[0]["layer"], 2);
    assert_eq!(m[0]["concept_count"], 3);
    assert_eq!(field(0, "branching_factor"), 1.0);
    assert!((field(0, "edge_weight_mean") - 0.5).abs() < 1e-12);
    assert!((field(0, "edge_weight_variance") - 0.125 / 3.0).abs() < 1e-12);
    assert_eq!(m[1]["concept_count"], 2);
    assert_eq!(field(1, "branching_factor"), 1.0);
    assert!((field(1, "edge_weight_mean") - 0.75).abs() < 1e-12);
    assert!((field(1, "edge_weight_variance") - 0.0625).abs() < 1e-12);
    let written: Value = serde_json::from_slice(&fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(written, v);
}

#[test]
fn validate_gradients_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&vcc(dir.path(), &["validate", "--gradients"]));
    let err = v["max_relative_error"].as_f64().unwrap();
    assert!(err < 1e-4, "{err}");
    assert_eq!(v["random_instances"]["instances"], 100);

    let out = vcc(dir.path(), &["validate", "--gradients", "--instances", "5", "--tolerance", "0"]);
    let (code, record) = failure(&out);
    assert_eq!(code, 3);
    assert_eq!(record["error"], "numeric_validation");
}

#[test]
fn validate_graph_accepts_fixture_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixture("two_layer_vcc.json");
    let v = ok(&vcc(dir.path(), &["validate", "--graph", g.to_str().unwrap()]));
    assert_eq!(v["graph"], "valid");

    let mut bad: Value = serde_json::from_slice(&fs::read(&g).unwrap()).unwrap();
    bad["edges"][0]["weight"] = 1.5.into();
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_vec(&bad).unwrap()).unwrap();
    let (code, record) = failure(&vcc(dir.path(), &["validate", "--graph", path.to_str().unwrap()]));
    assert_eq!(code, 1);
    assert_eq!(record["error"], "invalid_input");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--set", "edges.nope=1", "metrics"],
        vec!["--set", "edges.alpha=2", "metrics"],
        vec!["--jobs", "0", "metrics"],
        vec!["no-such-command"],
    ] {
        let (code, record) = failure(&vcc(dir.path(), &args));
        assert_eq!(code, 2, "{args:?}");
        assert_eq!(record["error"], "config");
        assert_eq!(record["exit_code"], 2);
    }
    fs::write(dir.path().join("cfg.json"), r#"{"build.images": 0}"#).unwrap();
    let (code, _) = failure(&vcc(dir.path(), &["--config", "cfg.json", "metrics"]));
    assert_eq!(code, 2);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcc(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("export-dot"));
}

#[test]
fn missing_oracle_program_is_a_bridge_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (code, record) = failure(&vcc(dir.path(), &["build", "--oracle", "/nonexistent/responder --flag"]));
    assert_eq!(code, 4);
    assert_eq!(record["error"], "bridge");
}

/// Settings small enough to run the whole pipeline in seconds.
const SMALL: &[&str] = &[
    "--set",
    "data.train_per_class=4",
    "--set",
    "data.eval_per_class=4",
    "--set",
    "data.pool_size=20",
    "--set",
    "train.epochs=1",
    "--set",
    "train.min_accuracy=0",
    "--set",
    "build.images=3",
    "--set",
    "edges.runs=2",
    "--set",
    "edges.negatives_per_run=5",
];

fn small(dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend_from_slice(extra);
    vcc(dir, &args)
}

fn snapshot(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(out).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_is_byte_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&small(d, &["gen-data"]));
    ok(&small(d, &["train"]));
    let first = ok(&small(d, &["--jobs", "1", "build"]));
    let a = snapshot(&d.join("out"));
    let second = ok(&small(d, &["--jobs", "2", "build"]));
    let b = snapshot(&d.join("out"));
    assert_eq!(first, second);
    assert!(a.iter().any(|(name, _)| name == "vcc.json"));
    assert!(a.iter().any(|(name, _)| name.ends_with("lineage.json")));
    assert_eq!(a, b);

    // The graph is readable by the downstream commands.
    ok(&small(d, &["validate", "--graph", "out/vcc.json"]));
    let dot = ok(&small(d, &["export-dot"]));
    assert!(fs::read_to_string(d.join(dot["dot"].as_str().unwrap())).unwrap().starts_with("digraph vcc {"));
    let rf = ok(&small(d, &["rf-report"]));
    assert_eq!(rf["layers"].as_array().unwrap().len(), 4);
    assert!(rf["relative_segment_size"].is_array());
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&small(d, &["gen-data"]));
    ok(&small(d, &["train"]));
    let out = Command::new(env!("CARGO_BIN_EXE_vcc"))
        .current_dir(d)
        .env("VCC_SEED", "42")
        .args(SMALL)
        .arg("build")
        .output()
        .unwrap();
    ok(&out);
    let cfg: Value = serde_json::from_slice(&fs::read(d.join("out/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 42);
    let graph: Value = serde_json::from_slice(&fs::read(d.join("out/vcc.json")).unwrap()).unwrap();
    assert_eq!(graph["seed"], 42);
}
