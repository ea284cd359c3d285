use assert_cmd::Command;
use predicates::prelude::*;

fn pathflow() -> Command {
    Command::cargo_bin("pathflow").unwrap()
}

#[test]
fn rejects_zero_path_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "m_paths": 0 }"#).unwrap();
    pathflow()
        .args(["ito-verify", "--config"])
        .arg(&cfg)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("m_paths"));
}

#[test]
fn rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "m_path": 100 }"#).unwrap();
    pathflow()
        .args(["converge", "--config"])
        .arg(&cfg)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("config error"));
}

#[test]
fn rejects_unknown_functional() {
    let dir = tempfile::tempdir().unwrap();
    pathflow()
        .current_dir(&dir)
        .args(["ito-verify", "--functional", "integral:nope", "--M", "1"])
        .assert()
        .code(2);
}

#[test]
fn rejects_bad_model_string() {
    let dir = tempfile::tempdir().unwrap();
    pathflow()
        .current_dir(&dir)
        .args(["gauss", "--model", "N=1;g1=exp:1"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("poly"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "seed": 3, "m_paths": 10, "n_grid": [32] }"#).unwrap();
    let out = dir.path().join("report.json");
    pathflow()
        .args(["ito-verify", "--config"])
        .arg(&cfg)
        .args(["--seed", "99", "--output"])
        .arg(&out)
        .assert()
        .success()
        .stdout(predicate::str::contains("PASS"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["seed"], 99);
    assert_eq!(report["schema"], "pathflow-report/1");
    assert!(report["passed"].as_bool().unwrap());
}

#[test]
fn gauss_example_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gauss.json");
    pathflow()
        .args([
            "gauss",
            "--model",
            "N=1;g1=poly:1,0;f=quad",
            "--M",
            "500",
            "--output",
        ])
        .arg(&out)
        .assert()
        .success()
        .stdout(predicate::str::contains("PASS pde_residual_probes"));
}

#[test]
fn writes_runtime_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smooth.json");
    pathflow()
        .args(["smooth", "--output"])
        .arg(&out)
        .assert()
        .success();
    let meta = dir.path().join("smooth.json.meta.json");
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(meta).unwrap()).unwrap();
    assert!(meta["runtime_ms"].is_u64());
}

#[test]
fn dump_paths_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ito.json");
    pathflow()
        .args(["ito-verify", "--N", "32", "--M", "5", "--dump-paths", "2", "--output"])
        .arg(&out)
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("ito.json.paths.csv")).unwrap();
    assert!(csv.starts_with("path,t,y,w"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("1,")).count(), 33);
}
