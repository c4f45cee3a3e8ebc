use std::path::Path;
use std::process::{Command, Output};

use lipcert::linop::{LinOp, Matrix};
use lipcert::netgraph::save_model;
use lipcert::{ActivationSector, Affine, ResidualBlock, ResidualChain};
use serde_json::Value;

fn lipcert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipcert"))
        .args(args)
        .current_dir(dir)
        .env_remove("LIPCERT_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lipcert(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data01() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist01").to_string()
}

fn data10() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist10").to_string()
}

/// `H₀ = diag(2, 0.5)`, `H₁ = diag(0.5, 2)`, `G = 0`, `W = I`.
fn diagonal_example(dir: &Path) {
    let diag = |a: f64, b: f64| LinOp::dense(Matrix::from_diagonal(&lipcert::Vector::from_vec(vec![a, b])));
    let block = |d: LinOp| ResidualBlock {
        skip: Affine::linear(d),
        mix: Affine::linear(LinOp::zero(2, 2)),
        pre: Affine::linear(LinOp::Identity(2)),
    };
    let chain = ResidualChain::new(
        vec![block(diag(2.0, 0.5)), block(diag(0.5, 2.0))],
        Affine::linear(LinOp::Identity(2)),
        ActivationSector::relu(),
        vec![2],
        2,
    )
    .unwrap();
    save_model(&chain, dir).unwrap();
}

#[test]
fn bound_on_diagonal_example_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    diagonal_example(&tmp.path().join("m"));
    ok(tmp.path(), &["bound", "--model", "m", "--method", "liplt", "--out", "b.json"]);
    let b = json(&tmp.path().join("b.json"));
    let l = b["report"]["L"].as_f64().unwrap();
    assert!((l - 1.0).abs() < 1e-5, "{l}");
    assert_eq!(b["config"]["method"], "liplt");
    assert_eq!(b["report"]["wall_time"], 0.0);

    ok(tmp.path(), &["bound", "--model", "m", "--method", "naive", "--out", "n.json"]);
    let n = json(&tmp.path().join("n.json"))["report"]["L"].as_f64().unwrap();
    assert!((n - 4.0).abs() < 1e-5, "{n}");
}

#[test]
fn bound_csv_lists_unique_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["train", "--data", "moons:100:0.1:1", "--hidden", "4", "--epochs", "1", "--out", "m"]);
    ok(tmp.path(), &["bound", "--model", "m", "--out", "b.csv"]);
    let csv = std::fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "i,j,L_ij");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,1,"));
    // --format overrides the extension
    let out = ok(tmp.path(), &["bound", "--model", "m", "--format", "json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["command"], "bound");
}

#[test]
fn zero_budget_certifies_every_correct_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data01();
    ok(
        tmp.path(),
        &["train", "--data", &data, "--limit", "400", "--hidden", "16", "--epochs", "2", "--out", "m", "--seed", "3"],
    );
    ok(tmp.path(), &["certify", "--model", "m", "--data", &data, "--eps", "0", "--out", "c.json"]);
    let c = json(&tmp.path().join("c.json"));
    assert_eq!(c["summary"]["cert_acc"], c["summary"]["clean_acc"]);
    assert_eq!(c["summary"]["n"], 128);
    assert_eq!(c["config"]["eps"], 0.0);
    assert_eq!(c["config"]["data"]["split"], "test");
    assert_eq!(c["config"]["run"]["power"]["max_iters"], 500);

    ok(tmp.path(), &["certify", "--model", "m", "--data", &data, "--eps", "0.5", "--out", "c.csv"]);
    let csv = std::fs::read_to_string(tmp.path().join("c.csv")).unwrap();
    assert!(csv.starts_with("index,label,pred,margin,radius_lower,soft_radius,verified\n"));
    assert_eq!(csv.lines().count(), 129);
}

#[test]
fn compare_grid_follows_table_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data10();
    ok(tmp.path(), &["train", "--data", &data, "--hidden", "64,64", "--epochs", "5", "--out", "m", "--seed", "2"]);
    ok(tmp.path(), &["compare", "--model", "m", "--out", "grid.csv"]);
    let csv = std::fs::read_to_string(tmp.path().join("grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,direct,class_sum,sqrt2");
    let rows: Vec<(String, Vec<f64>)> = lines
        .map(|l| {
            let mut parts = l.split(',');
            let name = parts.next().unwrap().to_string();
            (name, parts.map(|p| p.parse().unwrap()).collect())
        })
        .collect();
    assert_eq!(rows[0].0, "naive");
    assert_eq!(rows[1].0, "liplt");
    for j in 0..3 {
        assert!(rows[1].1[j] <= rows[0].1[j], "{csv}");
    }
    for (_, r) in &rows {
        assert!(r[0] <= r[1], "{csv}");
    }
    let lt = &rows[1].1;
    assert!(lt[1] <= lt[2], "{csv}");
}

#[test]
fn train_writes_model_metrics_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "train", "--data", "moons:200:0.1:1", "--val", "moons:100:0.1:2", "--hidden", "8,8", "--epochs", "3",
            "--lambda", "0.1", "--eps", "0.1", "--g", "exp", "--rbar", "0.3", "--out", "m", "--metrics", "metrics.csv",
        ],
    );
    let t = json(&tmp.path().join("m/train.json"));
    assert_eq!(t["config"]["crm"]["lambda"], 0.1);
    assert_eq!(t["config"]["crm"]["g"]["kind"], "exp_decay");
    assert_eq!(t["config"]["crm"]["g"]["scale"], 0.3);
    assert_eq!(t["metrics"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let model = lipcert::netgraph::parse_model(tmp.path().join("m")).unwrap();
    assert_eq!(model.input_dim(), 2);
    assert_eq!(model.depth(), 2);

    // continue training from the saved model
    ok(tmp.path(), &["train", "--data", "moons:200:0.1:1", "--model", "m", "--epochs", "1", "--out", "m2"]);
    assert!(tmp.path().join("m2/weights.bin").is_file());
}

#[test]
fn attack_reports_no_certified_flips() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["train", "--data", "moons:300:0.1:1", "--hidden", "16,16", "--epochs", "20", "--out", "m"]);
    ok(
        tmp.path(),
        &["attack", "--model", "m", "--data", "moons:200:0.1:2", "--eps", "0.1", "--restarts", "3", "--out", "a.json"],
    );
    let a = json(&tmp.path().join("a.json"));
    assert_eq!(a["summary"]["certified_but_flipped"].as_array().unwrap().len(), 0);
    assert_eq!(a["config"]["pgd"]["restarts"], 3);
    let rate = a["summary"]["attack_success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let robust = a["summary"]["empirical_robust_acc"].as_f64().unwrap();
    assert!((rate + robust - 1.0).abs() < 1e-12);
}

#[test]
fn worker_count_comes_from_flag_then_env() {
    let tmp = tempfile::tempdir().unwrap();
    diagonal_example(&tmp.path().join("m"));
    let out = Command::new(env!("CARGO_BIN_EXE_lipcert"))
        .args(["bound", "--model", "m"])
        .current_dir(tmp.path())
        .env("LIPCERT_THREADS", "3")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["run"]["workers"], 3);
    let out = Command::new(env!("CARGO_BIN_EXE_lipcert"))
        .args(["bound", "--model", "m", "--workers", "2"])
        .current_dir(tmp.path())
        .env("LIPCERT_THREADS", "3")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["run"]["workers"], 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    diagonal_example(&tmp.path().join("m"));
    let code = |args: &[&str]| lipcert(tmp.path(), args).status.code().unwrap();
    assert_eq!(code(&["bound", "--model", "m", "--out", "x.json"]), 0);
    // usage errors
    assert_eq!(code(&["bound", "--model", "m", "--bogus"]), 2);
    assert_eq!(code(&["bound"]), 2);
    assert_eq!(code(&["bound", "--model", "m", "--method", "magic"]), 2);
    assert_eq!(code(&["bound", "--model", "m", "--mode", "pairs"]), 2);
    assert_eq!(code(&["bound", "--model", "m", "--workers", "0"]), 2);
    assert_eq!(code(&["bound", "--model", "m", "--power-iters", "0"]), 2);
    assert_eq!(code(&["certify", "--model", "m", "--data", "moons:10:0.1:1", "--eps", "-1"]), 2);
    assert_eq!(code(&["certify", "--model", "m", "--data", "moons:ten", "--eps", "0.1"]), 2);
    assert_eq!(code(&["train", "--data", "moons:10:0.1:1", "--model", "m", "--hidden", "4", "--out", "o"]), 2);
    assert_eq!(code(&["train", "--data", "moons:10:0.1:1", "--lambda", "0.1", "--out", "o"]), 2);
    assert_eq!(code(&["train", "--data", "moons:10:0.1:1"]), 2);
    assert_eq!(code(&["attack", "--model", "m", "--data", "moons:10:0.1:1", "--eps", "0"]), 2);
    // runtime errors
    assert_eq!(code(&["bound", "--model", "missing"]), 1);
    assert_eq!(code(&["certify", "--model", "m", "--data", "nowhere", "--eps", "0.1"]), 1);
    assert_eq!(code(&["certify", "--model", "m", "--data", &data01(), "--eps", "0.1"]), 1);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn refined_methods_bound_but_do_not_train() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["train", "--data", "moons:100:0.1:1", "--hidden", "6", "--epochs", "1", "--out", "m"]);
    let mut values = Vec::new();
    for method in ["naive", "liplt", "refined:sn", "refined:aol"] {
        let out = ok(tmp.path(), &["bound", "--model", "m", "--method", method]);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        values.push(v["report"]["L"].as_f64().unwrap());
    }
    assert!(values[1] <= values[0] * (1.0 + 1e-9));
    let out = lipcert(
        tmp.path(),
        &["train", "--data", "moons:100:0.1:1", "--method", "refined:aol", "--epochs", "1", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
}
