use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaperf::pipeline::ExperimentConfig;

fn adaperf(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaperf"))
        .args(args)
        .env("ADAPERF_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = adaperf(&["train-adnn", "--config", "/does/not/exist.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let mut v = serde_json::to_value(ExperimentConfig::toy("run")).unwrap();
    v.as_object_mut().unwrap().remove("dataset");
    let path = tmp.path().join("partial.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = adaperf(&["run", "--config", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));

    let cfg = write_config(tmp.path(), &ExperimentConfig::toy("run"));
    let out = adaperf(&["run", "--config", &cfg, "--no-such-flag"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_without_generator_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &ExperimentConfig::toy("run"));
    assert!(adaperf(&["train-adnn", "--config", &cfg], tmp.path()).status.success());
    let out = adaperf(&["generate", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate") && err.contains("generator.ckpt"), "{err}");
}

#[test]
fn stage_by_stage_run_and_merged_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &ExperimentConfig::toy("run"));
    for cmd in ["train-adnn", "train-generator", "generate", "baseline", "evaluate"] {
        let out = adaperf(&[cmd, "--config", &cfg], tmp.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = tmp.path().join("run");
    let table = fs::read_to_string(run.join("report/metrics.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(rows[0].starts_with("producer,"));
    assert!(rows[1].starts_with("deepperform,"));
    assert!(rows[2].starts_with("iterative_baseline,"));

    let out = adaperf(&["sweep-thresholds", "--config", &cfg, "--taus", "0.5"], tmp.path());
    assert!(out.status.success());
    let sweep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sweep.as_array().unwrap().len(), 1);

    let merged = tmp.path().join("merged");
    let out = adaperf(
        &[
            "report",
            "--config",
            &cfg,
            "--suite",
            run.join("suites/deepperform").to_str().unwrap(),
            "--suite",
            run.join("suites/iterative_baseline").to_str().unwrap(),
            "--out",
            merged.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = fs::read_to_string(merged.join("metrics.csv")).unwrap();
    let strip = |s: &str| s.lines().skip(1).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(strip(&again), strip(&table));

    let out = adaperf(&["mitigate-detect", "--config", &cfg], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(eval["auc"].as_f64().unwrap() >= 0.0);
}
