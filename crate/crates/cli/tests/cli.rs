use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use valrecon::config::RunConfig;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_valrecon"));
    cmd.env_remove("OUTPUT_DIR");
    cmd
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synthetic.hours = 600;
    cfg.train.epochs = 3;
    cfg.quality.epochs = 3;
    cfg.sweep.w_grid = vec![0.0, 0.5, 1.0];
    cfg.casestudy.repetitions = 2;
    cfg.verify.instances = 50;
    cfg.verify.gradient_instances = 3;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["synth"], &cfg, &a).status.success());
    assert!(run(&["synth"], &cfg, &b).status.success());
    for name in ["generation.csv", "price.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let text = std::fs::read_to_string(a.join("generation.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
}

#[test]
fn seed_flag_changes_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["synth"], &cfg, &a).status.success());
    assert!(run(&["--seed", "7", "synth"], &cfg, &b).status.success());
    assert_ne!(
        std::fs::read(a.join("generation.csv")).unwrap(),
        std::fs::read(b.join("generation.csv")).unwrap()
    );
}

#[test]
fn single_producer_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.synthetic.m = 1;
    let cfg = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let o = run(&["fit"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("base_forecasts.csv").exists());
    let o = run(&["train", "--kind", "bottom_up"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("producer 1"));
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let o = run(&["verify"], &cfg, &out);
    if cfg!(feature = "inject-fault") {
        assert_eq!(o.status.code(), Some(1));
    } else {
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let report = std::fs::read_to_string(out.join("verify.csv")).unwrap();
    assert!(report.starts_with("# config_hash="));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = small_config().to_toml().unwrap().replace("w = 0.9", "w = 1.5");
    std::fs::write(&path, text).unwrap();
    let o = run(&["synth"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&path, "seed = \"not a number\"").unwrap();
    let o = run(&["synth"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn case1_writes_sweep_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let o = run(&["case", "--case", "case1"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.starts_with("# config_hash="));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), first);
    assert!(out.join("config.toml").exists());
}

#[test]
fn casestudy_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let o = run(&["case", "--case", "casestudy"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table2.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[1], "strategy,producer,AP_mean,AP_std");
    assert!(lines.len() > 2);
}

#[test]
fn train_writes_model_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let o = run(&["train"], &cfg, &out);
    assert!(
        matches!(o.status.code(), Some(0) | Some(1)),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for name in [
        "model_value_learned.txt",
        "training_value_learned.csv",
        "evaluation_value_learned.csv",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let env_out = dir.path().join("from_env");
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("synth")
        .env("OUTPUT_DIR", &env_out)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("generation.csv").exists());
}
