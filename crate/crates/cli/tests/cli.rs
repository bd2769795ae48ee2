use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_embedscale"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn modified_truth() -> Value {
    json!({
        "formula": "modified",
        "coefficients": {
            "irreducible_loss": 0.2, "a_d": 2.0, "b_d": 10.0, "alpha": 0.3,
            "a_s": 20.0, "b_s": 2.0, "c_s": 30.0, "beta": 0.25
        }
    })
}

fn small_grid() -> Value {
    json!({ "alpha": [0.2, 0.5], "beta": [0.2, 0.5], "irreducible_fraction": [0.0, 0.5], "scale": [0.1, 1.0] })
}

fn synth_grid() -> Value {
    json!({
        "budgets": [1.5e15, 6e15, 2.4e16, 9.6e16, 3.8e17, 1.5e18],
        "models": ["pythia-14m", "pythia-31m", "pythia-70m", "pythia-160m", "pythia-410m", "pythia-1b", "pythia-1.4b", "pythia-2.8b"],
        "methods": [
            { "method": "full" },
            { "method": "freeze" },
            { "method": "lora", "ranks": [128, 512, 2048] }
        ]
    })
}

#[test]
fn flops_full_is_six_n_d() {
    let v = ok_json(&["flops", "--arch", "pythia-160m", "--method", "full", "--tokens", "1e9"]);
    assert_eq!(v["flop"].as_f64().unwrap(), 6.0 * 85_056_000.0 * 1e9);
}

#[test]
fn tokens_inverts_flops() {
    let v = ok_json(&["tokens", "--arch", "pythia-410m", "--method", "lora:32", "--budget", "2.4e16"]);
    let d = v["tokens"].as_f64().unwrap();
    let c = ok_json(&["flops", "--arch", "pythia-410m", "--method", "lora:32", "--tokens", &d.to_string()]);
    assert!((c["flop"].as_f64().unwrap() / 2.4e16 - 1.0).abs() < 1e-12);
}

#[test]
fn arch_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    write(
        &path,
        &json!({ "name": "tiny", "n_layers": 2, "d_model": 64, "d_ff": 256, "n_heads": 4, "vocab_size": 1000, "max_seq_len": 128, "tie_embeddings": true }),
    );
    let v = ok_json(&["flops", "--arch", path.to_str().unwrap(), "--method", "freeze:1", "--tokens", "1e6"]);
    assert_eq!(v["arch"], "tiny");
}

#[test]
fn plan_above_threshold_is_lora() {
    let v = ok_json(&["plan", "--budget", "1.5e18"]);
    assert_eq!(v["method_class"], "lora");
    let v = ok_json(&["plan", "--budget", "1.5e15"]);
    assert_eq!(v["method_class"], "full");
    let v = ok_json(&["plan", "--budget", "1.5e15", "--mode", "freeze"]);
    assert_eq!(v["method_class"], "freeze");
}

#[test]
fn usage_errors_exit_two_with_suggestion() {
    let out = run(&["flops", "--arhc", "pythia-70m", "--method", "full", "--tokens", "1e9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--arch"));
    assert!(out.stdout.is_empty());

    let out = run(&["fit", "--runs", "x.jsonl", "--method", "full", "--per-method"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["isoflop", "--runs", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_errors_exit_one() {
    let out = run(&["flops", "--arch", "no-such-model", "--method", "full", "--tokens", "1e9"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["plan", "--budget=0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["flops", "--arch", "pythia-70m", "--method", "freeze:6", "--tokens", "1e9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn formats_render_the_same_result() {
    let args = ["tokens", "--arch", "pythia-70m", "--method", "bias", "--budget", "1e15"];
    let csv = run(&[&args[..], &["--format", "csv"]].concat());
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("key,value\n"));
    assert!(text.contains("method,bias\n"));
    let table = run(&[&args[..], &["--format", "table"]].concat());
    assert!(String::from_utf8(table.stdout).unwrap().contains("method"));
}

#[test]
fn synth_fit_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    write(Path::new(&p("truth.json")), &modified_truth());
    write(Path::new(&p("grid.json")), &synth_grid());
    write(Path::new(&p("init.json")), &small_grid());

    let out = run(&["synth", "--truth", &p("truth.json"), "--grid", &p("grid.json"), "--sigma", "0", "--out", &p("runs.jsonl")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = ok_json(&["ingest", "--runs", &p("runs.jsonl")]);
    assert!(summary["records"].as_u64().unwrap() > 100);

    let out = run(&["fit", "--runs", &p("runs.jsonl"), "--formula", "modified", "--init-grid", &p("init.json"), "--out", &p("fit.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p("fit.json")).unwrap()).unwrap();
    let truth = modified_truth();
    for (k, want) in truth["coefficients"].as_object().unwrap() {
        let got = report["coefficients"][k].as_f64().unwrap();
        let want = want.as_f64().unwrap();
        assert!((got / want - 1.0).abs() < 1e-3, "{k}: {got} vs {want}");
    }

    let pred = ok_json(&["predict", "--params", &p("fit.json"), "--n", "1e9", "--d", "1e9", "--s", "0.5"]);
    let want = ok_json(&["predict", "--params", &p("truth.json"), "--n", "1e9", "--d", "1e9", "--s", "0.5"]);
    let (a, b) = (pred["loss"].as_f64().unwrap(), want["loss"].as_f64().unwrap());
    assert!((a / b - 1.0).abs() < 1e-3);
}

#[test]
fn profiles_frontier_and_plan_from_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    write(Path::new(&p("truth.json")), &modified_truth());
    write(Path::new(&p("grid.json")), &synth_grid());
    let out = run(&["synth", "--truth", &p("truth.json"), "--grid", &p("grid.json"), "--sigma", "0.01", "--seed", "2", "--out", &p("runs.jsonl")]);
    assert!(out.status.success());

    let prof = run(&["isoflop", "--runs", &p("runs.jsonl"), "--method", "lora", "--format", "csv"]);
    let csv = String::from_utf8(prof.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 8);
    assert!(csv.lines().next().unwrap().contains("best_loss"));

    let out = run(&["frontier", "--runs", &p("runs.jsonl"), "--out", &p("frontier.json"), "--artifacts-out", &p("art.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let front: Value = serde_json::from_str(&std::fs::read_to_string(p("frontier.json")).unwrap()).unwrap();
    assert!(front["per_method_fits"].get("lora").is_some());

    let out = run(&["plan", "--budget", "1e17", "--artifacts", &p("art.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((plan["flop"].as_f64().unwrap() / 1e17 - 1.0).abs() < 0.01);

    let data = ok_json(&["isoflop", "--runs", &p("runs.jsonl"), "--data-constrained"]);
    assert!(data["groups"].is_array());
}

#[test]
fn corr_reads_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.csv");
    let mut body = String::from("model_name,method,tokens,final_loss,mteb_score,replicate\n");
    for (i, (loss, score)) in [(2.0, 0.40), (1.5, 0.45), (1.2, 0.50), (1.1, 0.49), (0.9, 0.60)].iter().enumerate() {
        body.push_str(&format!("pythia-70m,full,1e8,{loss},{score},{i}\n"));
    }
    std::fs::write(&path, body).unwrap();
    let v = ok_json(&["corr", "--runs", path.to_str().unwrap()]);
    assert_eq!(v["n"], 5);
    assert!((v["spearman"].as_f64().unwrap() + 0.9).abs() < 1e-12);
}

#[test]
fn synth_rejects_non_json_format() {
    let out = run(&["synth", "--truth", "t.json", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let a = run(&["plan", "--budget", "3e17"]);
    let b = run(&["plan", "--budget", "3e17"]);
    assert_eq!(a.stdout, b.stdout);
}
