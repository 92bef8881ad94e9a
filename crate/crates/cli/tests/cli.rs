use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flare_core::adapters::Method;
use flare_core::data::SplitSizes;
use flare_core::experiment::{default_language, ExperimentConfig, RunMetrics};
use flare_core::model::{ModelConfig, TaskKind};

fn flare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flare")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::new(TaskKind::Classification, vec![Method::Lora], dir.join("out"));
    cfg.model = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        ..ModelConfig::default()
    };
    cfg.sizes = Some(SplitSizes {
        train: 64,
        validation: 16,
        test: 24,
    });
    cfg.languages = vec![default_language()];
    cfg.seeds = vec![0];
    cfg.base_schedule.epochs = 1;
    cfg.xlt_schedule.epochs = 1;
    cfg.mt_schedule.epochs = 1;
    cfg.adapter.mt_dim = 8;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn config_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "task": "span", "methods": ["lora"], "output_dir": "o", "rnak": 3}"#)
        .unwrap();
    let out = flare(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnak"));

    let good = write_config(dir.path());
    let out = flare(&["run", "--config", good.to_str().unwrap(), "--r", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flare(&["run", "--config", good.to_str().unwrap(), "--method", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flare_mt"));
}

#[test]
fn runtime_problems_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = flare(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write_config(dir.path());
    let args = ["eval", "--config", cfg.to_str().unwrap(), "--method", "flare", "--language", "swap10", "--seed", "0"];
    let out = flare(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_then_eval_reproduces_the_stored_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let summary = stdout_json(&flare(&["run", "--config", cfg]));
    assert!(summary.as_array().is_some_and(|rows| !rows.is_empty()));

    let loaded = ExperimentConfig::load(&cfg_path).unwrap();
    let stored: RunMetrics = serde_json::from_str(
        &std::fs::read_to_string(loaded.run_root().join("lora/swap10/0/metrics.json")).unwrap(),
    )
    .unwrap();
    let preds = dir.path().join("preds.jsonl");
    let eval = stdout_json(&flare(&[
        "eval",
        "--config",
        cfg,
        "--method",
        "lora",
        "--language",
        "swap10",
        "--seed",
        "0",
        "--predictions",
        preds.to_str().unwrap(),
    ]));
    assert_eq!(eval["value"].as_f64().unwrap(), stored.value);
    assert!(preds.is_file());

    let report = stdout_json(&flare(&["report", "--dir", dir.path().join("out").to_str().unwrap()]));
    assert!(report.as_array().is_some_and(|rows| !rows.is_empty()));
    assert!(dir.path().join("out/report/summary.csv").is_file());
}
