use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meta_nssm::experiments::ExperimentConfig;
use meta_nssm::plants::PlantKind;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meta-nssm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default_for(PlantKind::Vdp);
    cfg.data.num_sources = 3;
    cfg.data.source_length = 80;
    cfg.data.segment_length = 40;
    cfg.data.target_length = 50;
    cfg.nssm.history = 3;
    cfg.nssm.horizon = 4;
    cfg.nssm.hidden_width = 6;
    cfg.nssm.hidden_layers = 1;
    cfg.meta.gamma = 300.0;
    cfg.meta.outer_iters = 6;
    cfg.meta.batch_size = 2;
    cfg.meta.windows_per_task = 8;
    cfg.meta.episode_len = 8;
    cfg.mpc.horizon = 5;
    cfg.checkpoint_every = 3;
    cfg.adapt.steps = 10;
    cfg.adapt.log_steps = vec![0, 10];
    cfg.adapt.track_steps = vec![10];
    cfg.track.episode_len = 20;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = cli(&["make-source", "--config", missing.to_str().unwrap(), "--seed", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"plant": "vdp", "unexpected": 1}"#).unwrap();
    let out = cli(&["make-source", "--config", bad.to_str().unwrap(), "--seed", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    ok(&["init-config", "--plant", "pendulum", "--out", path.to_str().unwrap()]);
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, ExperimentConfig::default_for(PlantKind::Pendulum));
}

#[test]
fn resumed_meta_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    ok(&["make-source", "--config", &cfg, "--seed", "1", "--out", data_s]);

    let full = dir.path().join("full");
    ok(&["meta-train", "--config", &cfg, "--data", data_s, "--algorithm", "imaml", "--seed", "1", "--out", full.to_str().unwrap()]);

    // stop after the first checkpoint by shortening the budget, then resume with the full one
    let mut short = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    short.meta.outer_iters = 3;
    let short_path = dir.path().join("short.json");
    short.save(&short_path).unwrap();
    let split = dir.path().join("split");
    let split_s = split.to_str().unwrap();
    ok(&["meta-train", "--config", short_path.to_str().unwrap(), "--data", data_s, "--algorithm", "imaml", "--seed", "1", "--out", split_s]);
    ok(&["meta-train", "--config", &cfg, "--data", data_s, "--algorithm", "imaml", "--seed", "1", "--out", split_s, "--resume"]);

    for file in ["metrics.csv", "checkpoint.json"] {
        assert_eq!(fs::read(full.join(file)).unwrap(), fs::read(split.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn report_aggregates_adaptation_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let runs = dir.path().join("runs");
    for seed in ["0", "1"] {
        let data = runs.join(format!("s{seed}")).join("data");
        ok(&["make-source", "--config", &cfg, "--seed", seed, "--out", data.to_str().unwrap()]);
        let out = runs.join(format!("s{seed}")).join("supervised");
        ok(&["adapt", "--config", &cfg, "--data", data.to_str().unwrap(), "--algorithm", "supervised", "--seed", seed, "--out", out.to_str().unwrap()]);
    }
    ok(&["report", "--out", runs.to_str().unwrap()]);
    let text = fs::read_to_string(runs.join("aggregate.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("algorithm,adapt_steps,metric,n,mean,std"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0] == "supervised" && r[2] == "target_loss" && r[3] == "2"));
}

#[test]
fn supervised_adaptation_rejects_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["make-source", "--config", &cfg, "--seed", "0", "--out", data.to_str().unwrap()]);
    let out = cli(&[
        "adapt", "--config", &cfg, "--data", data.to_str().unwrap(), "--algorithm", "supervised",
        "--checkpoint", "whatever.json", "--seed", "0", "--out", dir.path().join("a").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
