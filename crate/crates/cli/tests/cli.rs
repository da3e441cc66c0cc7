use std::path::PathBuf;
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn trafficmoe(workdir: &std::path::Path, config: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafficmoe"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[windows]\nc = 0\n").unwrap();
    let out = trafficmoe(dir.path(), &bad, &["synth"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    assert_eq!(trafficmoe(dir.path(), &bad, &["synth"]).status.code(), Some(2));
}

#[test]
fn missing_prerequisite_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = trafficmoe(dir.path(), &smoke_config(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn smoke_pipeline_runs_and_reruns_as_noops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let steps: [&[&str]; 9] = [
        &["synth"],
        &["ingest"],
        &["denoise"],
        &["featurize"],
        &["train", "lob-noop"],
        &["train", "recurrent"],
        &["train", "nonrecurrent"],
        &["train", "moe"],
        &["evaluate"],
    ];
    for args in steps {
        let out = trafficmoe(dir.path(), &cfg, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let again = trafficmoe(dir.path(), &cfg, &["evaluate"]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("up to date"));
    assert!(dir.path().join("eval/all/metrics.csv").exists());

    let other = trafficmoe(dir.path(), &cfg, &["--seed", "99", "evaluate"]);
    assert_eq!(other.status.code(), Some(3));
}

#[test]
fn config_command_prints_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = trafficmoe(dir.path(), &smoke_config(), &["config"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 11"), "{text}");
}
