use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sta"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sta")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A small, fast configuration so each test finishes in seconds.
const SMALL: &str = r#"
out_dir = "out"

[dataset]
kind = "sbm"
blocks = 2
per_block = 40
p_in = 0.2
p_out = 0.02
signal = 3.0

[train]
hops = 3
heads = 2
hidden = 8
max_epochs = 30
patience = 30

[oracle_check]
graphs = 6
sizes = [8, 16]
max_hops = 3
heads = [1, 2]

[theorem]
nodes = 24
edge_prob = 0.3
k_max = 120

[bench]
nodes = 128
edge_counts = [256, 512]
hops = 2
dim = 4
heads = 1
dense_nodes = [32, 64]
avg_degree = 4
hop_sweep = [1, 2]
repeats = 1
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

#[test]
fn zero_learning_rate_leaves_loss_flat() {
    let dir = setup();
    let out = sta(dir.path(), &["--config", "run.toml", "--lr", "0", "train"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("out/train_report.json"));
    let losses = report["report"]["train_loss"].as_array().unwrap();
    assert!(losses.len() > 1);
    // Default dropout is zero, so both curves see identical weights each epoch.
    for curve in ["train_loss", "val_loss"] {
        let c = report["report"][curve].as_array().unwrap();
        assert!(
            c.iter().all(|v| v.as_f64() == c[0].as_f64()),
            "{curve} moved"
        );
    }
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(report["seed"], 0);
}

#[test]
fn train_eval_and_gpr_dump_round_trip() {
    let dir = setup();
    let out = sta(
        dir.path(),
        &["--config", "run.toml", "--seed", "4", "train"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let train: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(train["seed"], 4);

    let out = sta(
        dir.path(),
        &["--config", "run.toml", "eval", "--split", "test"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval = json(&dir.path().join("out/eval.json"));
    // Evaluating the best checkpoint on the test split reproduces the
    // number recorded during training.
    assert_eq!(eval["value"].as_f64(), train["test_at_best"].as_f64());
    assert_eq!(eval["seed"], 4);

    let out = sta(dir.path(), &["--config", "run.toml", "gpr-dump"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let gpr = json(&dir.path().join("out/gpr.json"));
    assert_eq!(gpr["gpr_weights"].as_array().unwrap().len(), 4);
    let gates = gpr["gates"].as_array().unwrap();
    assert_eq!(gates.len(), 3);
    for row in gates {
        let s: f64 = row
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-12, "softmax gates sum to {s}");
    }
    let csv = fs::read_to_string(dir.path().join("out/gpr.csv")).unwrap();
    assert!(csv.starts_with("# seed=4 config_hash="));
    assert_eq!(csv.lines().filter(|l| l.starts_with("alpha,")).count(), 4);
    assert_eq!(
        csv.lines().filter(|l| l.starts_with("gate,")).count(),
        3 * 2
    );
}

#[test]
fn oracle_check_passes() {
    let dir = setup();
    let out = sta(dir.path(), &["--config", "run.toml", "oracle-check"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&dir.path().join("out/oracle_check.json"));
    assert_eq!(r["pass"], true);
    assert_eq!(r["graphs"].as_array().unwrap().len(), 6);
    assert!(r["max_deviation"].as_f64().unwrap() < 1e-8);
}

#[test]
fn verify_theorem1_writes_both_reports() {
    let dir = setup();
    let out = sta(dir.path(), &["--config", "run.toml", "verify-theorem1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&dir.path().join("out/theorem1.json"));
    assert_eq!(r["mixing"]["num_nodes"], 24);
    assert_eq!(r["mixing"]["bound_violations"], 0);
    assert_eq!(r["ratio"]["k_max"], 120);
}

#[test]
fn bench_writes_tagged_csv() {
    let dir = setup();
    let out = sta(
        dir.path(),
        &["--config", "run.toml", "--seed", "9", "bench"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 4 + 2);
    assert!(lines[1].starts_with("9,"));
    let summary = json(&dir.path().join("out/bench.json"));
    assert_eq!(summary["seed"], 9);
    assert_eq!(
        summary["summary"]["edge_doubling"]
            .as_array()
            .unwrap()
            .len(),
        1
    );
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = setup();
    let code = |args: &[&str]| sta(dir.path(), args).status.code().unwrap();

    // Validation: bad value, unknown key, bad dataset spec, bad flag.
    assert_eq!(code(&["--config", "run.toml", "--lr", "-1", "train"]), 1);
    fs::write(dir.path().join("bad.toml"), "bogus = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "train"]), 1);
    assert_eq!(code(&["--dataset", "a,b", "train"]), 1);
    assert_eq!(code(&["--no-such-flag", "train"]), 1);

    // Numerical: an unreachable oracle tolerance.
    fs::write(
        dir.path().join("tight.toml"),
        "[oracle_check]\ngraphs = 2\nsizes = [8]\ntolerance = 1e-300\n",
    )
    .unwrap();
    assert_eq!(
        code(&["--config", "tight.toml", "--out", "t", "oracle-check"]),
        2
    );

    // I/O: missing config file and missing checkpoint.
    assert_eq!(code(&["--config", "missing.toml", "train"]), 3);
    assert_eq!(
        code(&["--config", "run.toml", "eval", "--checkpoint", "nope.ckpt"]),
        3
    );

    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn file_dataset_via_directory() {
    let dir = setup();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    // Two triangles joined by one edge; labels follow the triangles.
    fs::write(
        data.join("edges.txt"),
        "0 1\n1 2\n2 0\n3 4\n4 5\n5 3\n2 3\n",
    )
    .unwrap();
    let feats: String = (0..6)
        .map(|i| format!("{},{}\n", (i < 3) as u8, (i >= 3) as u8))
        .collect();
    fs::write(data.join("features.csv"), feats).unwrap();
    fs::write(data.join("labels.txt"), "0\n0\n0\n1\n1\n1\n").unwrap();
    let out = sta(
        dir.path(),
        &[
            "--dataset",
            "data",
            "--out",
            "f",
            "verify-theorem1",
            "--k",
            "60",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json(&dir.path().join("f/theorem1.json"));
    assert_eq!(r["mixing"]["num_nodes"], 6);
    assert_eq!(r["mixing"]["num_edges"], 7);
}
