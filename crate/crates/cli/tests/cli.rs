use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn distgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distgp"))
        .args(args)
        .env_remove("DISTGP_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn toy_config(outputs: &Path, steps: usize) -> String {
    format!(
        r#"{{
  "task": "regression",
  "dataset": {{"kind": "toy_regression", "seed": 3, "n": 200}},
  "network": {{
    "input": {{"height": 1, "width": 1, "channels": 1}},
    "layers": [{{"type": "dense_svgp", "inducing": 15, "outputs": 1}}]
  }},
  "train": {{"learning_rate": 0.01, "batch_size": 100, "max_steps": {steps}, "eval_every": 50, "seed": 7}},
  "outputs": {:?}
}}"#,
        outputs.to_str().unwrap()
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = distgp(&["train", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read run config"));
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let body = toy_config(&dir.path().join("out"), 10).replacen("\"task\"", "\"colour\": 1, \"task\"", 1);
    let cfg = write_config(dir.path(), "run.json", &body);
    let out = distgp(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn bad_thread_env_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_distgp"))
        .args(["audit", "x.ckpt"])
        .env("DISTGP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let out = distgp(&["eval", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn toy_run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let cfg = write_config(dir.path(), &format!("{run}.json"), &toy_config(&out_dir, 200));
        ok(&distgp(&["train", cfg.to_str().unwrap()]));
        for f in ["model.ckpt", "metrics.jsonl", "config.resolved.json"] {
            assert!(out_dir.join(f).is_file(), "{f} missing");
        }
        metrics.push(std::fs::read(out_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(metrics[0].len(), metrics[1].len());
    assert!(metrics[0] == metrics[1], "seeded runs produced different metrics");
    assert_eq!(String::from_utf8_lossy(&metrics[0]).lines().count(), 4);

    // the snapshot alone reproduces the run
    let snap = dir.path().join("a").join("config.resolved.json");
    let again = dir.path().join("c");
    ok(&distgp(&["train", snap.to_str().unwrap(), "--outputs", again.to_str().unwrap()]));
    assert!(std::fs::read(again.join("metrics.jsonl")).unwrap() == metrics[0]);
}

#[test]
fn flags_override_config_scalars() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &toy_config(&dir.path().join("ignored"), 200));
    let out_dir = dir.path().join("override");
    ok(&distgp(&["train", cfg.to_str().unwrap(), "--outputs", out_dir.to_str().unwrap(), "--max-steps", "20", "--seed", "9"]));
    let snap = read_json(&out_dir.join("config.resolved.json"));
    assert_eq!(snap["train"]["max_steps"], 20);
    assert_eq!(snap["train"]["seed"], 9);
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn eval_on_training_data_recovers_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("toy");
    let cfg = write_config(dir.path(), "run.json", &toy_config(&out_dir, 1500));
    ok(&distgp(&["train", cfg.to_str().unwrap()]));
    ok(&distgp(&["eval", out_dir.join("model.ckpt").to_str().unwrap()]));
    let summary = read_json(&out_dir.join("eval_summary.json"));
    let rmse = summary["rmse"].as_f64().unwrap();
    assert!(rmse <= 2.0 * 0.1, "rmse {rmse}");
    assert_eq!(summary["examples"], 200);

    let csv = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "example_id,mean_0,variance_0,within_0,distributional,distributional_entropy,predictive_entropy,target_0"
    );
    assert_eq!(lines.count(), 200);
}

#[test]
fn ood_on_same_distribution_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("toy");
    let cfg = write_config(dir.path(), "run.json", &toy_config(&out_dir, 300));
    ok(&distgp(&["train", cfg.to_str().unwrap()]));
    let ckpt = out_dir.join("model.ckpt");

    // identical datasets
    let same = r#"{"kind": "toy_regression", "seed": 11, "n": 500}"#;
    ok(&distgp(&["ood", ckpt.to_str().unwrap(), "--in-data", same, "--ood-data", same, "--fpr", "0.05,0.1"]));
    let table = read_json(&out_dir.join("ood_auc.json"));
    for (name, v) in table.as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.5, "{name}");
    }

    // fresh draws from the same generator
    let a = r#"{"kind": "toy_regression", "seed": 21, "n": 2000}"#;
    let b = r#"{"kind": "toy_regression", "seed": 22, "n": 2000}"#;
    ok(&distgp(&["ood", ckpt.to_str().unwrap(), "--in-data", a, "--ood-data", b, "--fpr", "0.05,0.1"]));
    let table = read_json(&out_dir.join("ood_auc.json"));
    assert_eq!(table.as_object().unwrap().len(), 3);
    for (name, v) in table.as_object().unwrap() {
        let auc = v.as_f64().unwrap();
        assert!((auc - 0.5).abs() <= 0.05, "{name}: {auc}");
    }
    let thresholds = read_json(&out_dir.join("ood_thresholds.json"));
    let rows = thresholds.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let fpr = r["fpr"].as_f64().unwrap();
        assert!(r["in_flag_rate"].as_f64().unwrap() <= fpr + 1.0 / 2000.0);
        assert!(r["dice"].as_f64().is_some());
    }
    let scores = std::fs::read_to_string(out_dir.join("ood_scores.csv")).unwrap();
    assert!(scores.starts_with("example_id,score_name,value,split\n"));
    assert_eq!(scores.lines().count(), 1 + 3 * 4000);
}

fn normalized_config(outputs: &Path) -> String {
    format!(
        r#"{{
  "task": "classification",
  "dataset": {{"kind": "banana", "seed": 5, "n": 400}},
  "network": {{
    "input": {{"height": 1, "width": 1, "channels": 2}},
    "layers": [
      {{"type": "dense_svgp", "inducing": 10, "outputs": 3}},
      {{"type": "affine_conv", "kernel_size": 1, "channels_out": 3, "lipschitz_normalized": true}},
      {{"type": "distgp_activation", "inducing": 10, "channels_out": 3, "mean_function": "identity"}},
      {{"type": "dense_distgp", "inducing": 10, "channels_out": 2}}
    ]
  }},
  "train": {{"learning_rate": 0.01, "batch_size": 100, "max_steps": 150, "eval_every": 50, "seed": 1,
             "lipschitz_projection": true}},
  "outputs": {:?}
}}"#,
        outputs.to_str().unwrap()
    )
}

#[test]
fn audit_of_normalized_model_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("net");
    let cfg = write_config(dir.path(), "run.json", &normalized_config(&out_dir));
    ok(&distgp(&["train", cfg.to_str().unwrap()]));
    let ckpt = out_dir.join("model.ckpt");

    ok(&distgp(&["--threads", "2", "audit", ckpt.to_str().unwrap(), "--lipschitz", "--pairs", "500"]));
    let report = read_json(&out_dir.join("audit.json"));
    let lip = &report["lipschitz"];
    assert_eq!(lip["violations"], 0);
    assert!(lip["max_affine_bound"].as_f64().unwrap() <= 1.0 + 1e-12);
    let layers = lip["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for l in layers {
        assert_eq!(l["audit"]["pairs"], 500);
        assert_eq!(l["audit"]["violations"], 0, "{l}");
    }
    assert!(report.get("collapse").is_none());

    ok(&distgp(&["collapse-check", ckpt.to_str().unwrap()]));
    let report = read_json(&out_dir.join("audit.json"));
    assert!(report.get("lipschitz").is_none());
    let collapse = report["collapse"]["layers"].as_array().unwrap();
    assert_eq!(collapse.len(), 2);
    assert!(collapse.iter().all(|l| l["statement_lhs"].as_f64().is_some() && l["remark_lhs"].as_f64().is_some()));

    ok(&distgp(&["eval", ckpt.to_str().unwrap()]));
    let acc = read_json(&out_dir.join("eval_summary.json"))["accuracy"].as_f64().unwrap();
    assert!(acc > 0.5, "accuracy {acc}");
}

#[test]
fn non_finite_targets_exit_numerical_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    let mut body = String::from("x,y\n");
    for i in 0..20 {
        let y = if i == 3 { "NaN".to_string() } else { format!("{}", i as f64 * 0.1) };
        body.push_str(&format!("{},{y}\n", i as f64 * 0.3));
    }
    std::fs::write(&csv, body).unwrap();
    let out_dir = dir.path().join("out");
    let cfg = toy_config(&out_dir, 10).replacen(
        r#"{"kind": "toy_regression", "seed": 3, "n": 200}"#,
        &format!(r#"{{"kind": "csv", "paths": [{:?}]}}"#, csv.to_str().unwrap()),
        1,
    );
    let cfg = write_config(dir.path(), "run.json", &cfg);
    let out = distgp(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let diag = read_json(&out_dir.join("diagnostics.json"));
    assert_eq!(diag["step"], 0);
    assert!(diag["error"].as_str().unwrap().contains("not finite"));
    assert!(out_dir.join("last_good.ckpt").is_file());
}
