use std::path::Path;
use std::process::{Command, Output};

use tsaug::toy::noisy_sine_prices;

fn tsaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_prices(dir: &Path, len: usize) -> std::path::PathBuf {
    let path = dir.join("prices.csv");
    noisy_sine_prices(len, 25.0, 0.01, 4).unwrap().write_csv(&path).unwrap();
    path
}

const TINY_GAN: &str = r#"{
  "generator": {"depth": 1, "heads": 2, "embed_dim": 4, "patch_size": 4, "latent_dim": 8, "seq_len": 24},
  "discriminator": {"depth": 1, "heads": 2, "embed_dim": 4, "patch_size": 4, "seq_len": 24},
  "training": {"epochs": 2, "batch_size": 16, "metric_every": 1, "metric_sample_n": 8}
}"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tsaug(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tsaug(&["ingest", "--k", "x"]).status.code(), Some(1));
    assert_eq!(tsaug(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_window_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let prices = write_prices(dir.path(), 100);
    let out = tsaug(&["ingest", "--input", p(&prices), "--k", "24", "--t", "24", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = tsaug(&["ingest", "--input", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,close\n2020-01-01,1\n2020-01-01,2\n").unwrap();
    let out = tsaug(&["ingest", "--input", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let prices = write_prices(d, 160);
    let sets = d.join("sets");
    let out = tsaug(&["ingest", "--input", p(&prices), "--k", "24", "--t", "16", "--out", p(&sets)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["train", "validation", "test"] {
        assert!(sets.join(format!("{name}.json")).exists());
    }

    let cfg = d.join("gan.json");
    std::fs::write(&cfg, TINY_GAN).unwrap();
    let ckpt = d.join("ckpt");
    let curves = d.join("curves.csv");
    let out = tsaug(&[
        "train-gan",
        "--data",
        p(&sets.join("train.json")),
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--log",
        p(&curves),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(&curves).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(ckpt.join("final/model.safetensors").exists());

    // the test split is refused as GAN training data
    let out = tsaug(&["train-gan", "--data", p(&sets.join("test.json")), "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));

    let synth = d.join("synth.json");
    let out = tsaug(&["generate", "--ckpt", p(&ckpt.join("final")), "--n", "12", "--seed", "7", "--t", "16", "--out", p(&synth)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let generated = tsaug::data::SequenceSet::load(&synth).unwrap();
    assert_eq!(generated.len(), 12);
    assert_eq!(generated.window.t, 16);

    let out = tsaug(&["metrics", "compare", "--a", p(&sets.join("train.json")), "--b", p(&synth), "--n", "8", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_used"], 8);
    assert_eq!(report["seed"], 7);
    assert_eq!(report["base_metric"], "dtw");
    assert!(report["wasserstein"].as_f64().unwrap() >= 0.0);
    assert!(report["dtw_dedims"].as_f64().is_some());

    let lstm = d.join("lstm.json");
    std::fs::write(&lstm, r#"{"hidden_size": 8, "num_layers": 1, "epochs": 3}"#).unwrap();
    let model = d.join("model");
    let out = tsaug(&[
        "train-forecaster",
        "--train",
        p(&sets.join("train.json")),
        "--val",
        p(&sets.join("validation.json")),
        "--config",
        p(&lstm),
        "--out",
        p(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.join("history.csv").exists());

    let out = tsaug(&["forecast", "eval", "--model", p(&model), "--test", p(&sets.join("test.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["split"], "test");
    assert!(eval["mse"].as_f64().unwrap() >= 0.0);

    // evaluation on anything but a test split is refused
    let out = tsaug(&["forecast", "eval", "--model", p(&model), "--test", p(&sets.join("train.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_prices(d, 240);
    let spec = r#"{
      "windows": [
        {"label": "toy", "series": "prices.csv", "start": 0, "end": 120},
        {"label": "toy", "series": "prices.csv", "start": 120, "end": 240}
      ],
      "window_spec": {"t": 16, "s": 8},
      "generator": {"depth": 1, "heads": 2, "embed_dim": 4, "patch_size": 4, "latent_dim": 8, "seq_len": 24},
      "discriminator": {"depth": 1, "heads": 2, "embed_dim": 4, "patch_size": 4, "seq_len": 24},
      "training": {"epochs": 2, "batch_size": 16, "metric_every": 1, "metric_sample_n": 8},
      "forecaster": {"hidden_size": 8, "num_layers": 1, "epochs": 3},
      "master_seed": 11
    }"#;
    let spec_path = d.join("experiment.json");
    std::fs::write(&spec_path, spec).unwrap();
    let results = d.join("results");
    let out = tsaug(&["experiment", "run", "--spec", p(&spec_path), "--out", p(&results)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(results.join("table1.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("group,n,mean_improvement,se,t,p"));
    assert!(lines.next().unwrap().starts_with("toy/24,2,"));
    assert_eq!(std::fs::read_to_string(results.join("windows.csv")).unwrap().lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(results.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_failed"], 0);
    let curves = std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("curves.csv").exists())
        .count();
    assert_eq!(curves, 2);

    let overlapping = spec.replace("\"start\": 120", "\"start\": 100");
    std::fs::write(&spec_path, overlapping).unwrap();
    let out = tsaug(&["experiment", "run", "--spec", p(&spec_path), "--out", p(&results)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn defaults_match_committed_file() {
    let out = tsaug(&["defaults"]);
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let committed: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../defaults.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(printed, committed);
}
