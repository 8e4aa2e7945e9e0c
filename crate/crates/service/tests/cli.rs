mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn steexlab(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steexlab"))
        .env("STEEXLAB_HOME", home)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    let v: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)));
    common::assert_valid("error", &v);
    v
}

#[test]
fn explain_twice_gives_identical_digests() {
    let h = common::home();
    let q = common::query_png(h.path());
    let q = q.to_str().unwrap();
    let args = |run: &'static str| {
        ["explain", "--image", q, "--model", "clf1", "--regions", "light", "--seed", "3", "--steps", "15", "--run-id", run]
    };
    let a = ok_json(&steexlab(h.path(), &args("r1")));
    let b = ok_json(&steexlab(h.path(), &args("r2")));
    let digest = |v: &Value| v["results"][0]["digest"].as_str().unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(digest(&a).len(), 64);
    // only the light region (class 3) may move
    let norms = a["results"][0]["delta_norms"].as_array().unwrap();
    assert!(norms.iter().enumerate().all(|(i, d)| i == 2 || d.as_f64() == Some(0.0)));
    let run = h.path().join("runs/r1");
    assert!(run.join("config.resolved.json").is_file());
    for f in ["result.json", "query.png", "counterfactual.png", "reconstruction.png", "mask.png", "trajectory.csv"] {
        assert!(run.join("results/000").join(f).is_file(), "{f}");
    }
    let bytes = |run: &str| std::fs::read(h.path().join(run).join("results/000/counterfactual.png")).unwrap();
    assert_eq!(bytes("runs/r1"), bytes("runs/r2"));
}

#[test]
fn reusing_a_run_id_is_an_error() {
    let h = common::home();
    let args = ["explain", "--dataset", common::DATASET, "--index", "50", "--model", "clf1", "--steps", "3", "--run-id", "same"];
    ok_json(&steexlab(h.path(), &args));
    let e = error_json(&steexlab(h.path(), &args));
    assert!(e["error"]["message"].as_str().unwrap().contains("already exists"));
}

#[test]
fn evaluate_reports_a_success_rate() {
    let h = common::home();
    let run = ["explain", "--dataset", common::DATASET, "--first", "3", "--model", "clf1", "--steps", "10", "--run-id", "r1"];
    let summary = ok_json(&steexlab(h.path(), &run));
    assert_eq!(summary["results"].as_array().unwrap().len(), 3);
    let report = ok_json(&steexlab(h.path(), &["evaluate", "--results", "runs/r1", "--run-id", "e1"]));
    let rate = report["success_rate"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(report["success_rate"]["count"], 3);
    let stored: Value = serde_json::from_slice(&std::fs::read(h.path().join("runs/e1/report.json")).unwrap()).unwrap();
    assert_eq!(stored["success_rate"], report["success_rate"]);
    assert!(h.path().join("runs/e1/items.csv").is_file());
}

#[test]
fn module_failures_exit_nonzero_with_a_structured_error() {
    let h = common::home();
    let e = error_json(&steexlab(h.path(), &["explain", "--dataset", common::DATASET, "--model", "missing"]));
    assert_eq!(e["error"]["class"], "bad_request");
    let e = error_json(&steexlab(h.path(), &["explain", "--dataset", common::DATASET, "--model", "clf1", "--regions", "lake"]));
    assert!(e["error"]["message"].as_str().unwrap().contains("lake"));
    let cfg = h.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "optimizer": { "lambda": 0.3, "momentum": 0.9 } }"#).unwrap();
    let e = error_json(&steexlab(
        h.path(),
        &["explain", "--dataset", common::DATASET, "--model", "clf1", "--config", cfg.to_str().unwrap()],
    ));
    assert!(e["error"]["message"].as_str().unwrap().contains("momentum"));
    let e = error_json(&steexlab(h.path(), &["evaluate", "--results", "runs/none"]));
    assert_eq!(e["error"]["class"], "cli");
}

#[test]
fn training_writes_a_snapshot_refuses_reuse_and_registers() {
    let h = common::home();
    let cfg = h.path().join("clf.json");
    std::fs::write(&cfg, r#"{ "schedule": { "epochs": 1, "batch_size": 8, "learning_rate": 0.003, "final_lr_fraction": 1.0 } }"#).unwrap();
    let args = [
        "train", "clf", "--dataset", common::DATASET, "--id", "top", "--visibility", "top", "--config", cfg.to_str().unwrap(),
        "--register",
    ];
    let out = ok_json(&steexlab(h.path(), &args));
    assert_eq!(out["epochs"], 1);
    assert_eq!(out["registered"]["status"], "ready");
    let snap: Value =
        serde_json::from_slice(&std::fs::read(h.path().join("models/top/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(snap["training"]["visibility"]["name"], "top");

    let e = error_json(&steexlab(h.path(), &args[..args.len() - 1]));
    assert!(e["error"]["message"].as_str().unwrap().contains("--resume"));
    // resuming a finished run with the same configuration is a no-op
    let mut resume = args[..args.len() - 1].to_vec();
    resume.push("--resume");
    assert_eq!(ok_json(&steexlab(h.path(), &resume))["digest"], out["digest"]);
    let mut changed = resume.clone();
    changed.extend(["--seed", "9"]);
    error_json(&steexlab(h.path(), &changed));

    let list = ok_json(&steexlab(h.path(), &["models", "list"]));
    common::assert_valid("model_list", &list);
    assert_eq!(list["models"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_regions_runs_one_search_per_set() {
    let h = common::home();
    let out = ok_json(&steexlab(
        h.path(),
        &[
            "sweep-regions", "--dataset", common::DATASET, "--index", "50", "--model", "clf1", "--steps", "5", "--sets",
            "light;obstacle,sign;all", "--run-id", "s1",
        ],
    ));
    let rows = out["results"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["regions"], serde_json::json!(["light"]));
    assert_eq!(rows[2]["regions"].as_array().unwrap().len(), 8);
}

#[test]
fn synthesized_datasets_are_append_only() {
    let h = common::home();
    let args = ["dataset", "synth", "--id", "small", "--count", "10", "--seed", "1"];
    let out = ok_json(&steexlab(h.path(), &args));
    assert_eq!(out["manifest"]["count"], 10);
    assert!(h.path().join("datasets/small/config.resolved.json").is_file());
    error_json(&steexlab(h.path(), &args));
}
