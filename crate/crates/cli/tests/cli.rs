use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajdistill"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn stage(out: &Path, args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args)
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = stage(out, args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_pipeline_runs_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    ok(out, &["train-reward"]);
    ok(out, &["train-teacher"]);
    ok(out, &["distill"]);
    let report = ok(out, &["eval"]);
    assert!(report.contains("\"mean_return\""));
    let bench = ok(out, &["bench"]);
    assert!(bench.starts_with("sampler,nfe,median_ms,speedup"));
    assert!(bench.contains("ddpm-15,15,"));
    assert!(bench.contains("ddim-15,15,"));
    assert!(bench.contains("heun-40,79,"));
    assert!(bench.contains("student-1,1,"));
}

#[test]
fn swapping_reward_weights_reuses_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    ok(out, &["train-reward"]);
    let teacher = ok(out, &["train-teacher"]);
    let a = ok(out, &["distill", "--reward-weight", "0"]);
    let b = ok(out, &["distill", "--reward-weight", "0.2"]);
    assert_ne!(a, b);
    let teachers: Vec<_> = std::fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("teacher-"))
        .collect();
    assert_eq!(teachers.len(), 1, "{teacher}");
}

#[test]
fn distill_before_teacher_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stage(dir.path(), &["distill"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-teacher"));
}

#[test]
fn unknown_flag_exits_with_usage() {
    let o = bin().args(["eval", "--bogus"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[distill.weights]\nreward = -1.0\n").unwrap();
    let o = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reward weight"));
}

#[test]
fn runtime_failure_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    // corrupt the dataset so loading it fails at run time
    let data_dir = std::fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("data-"))
        .unwrap()
        .path();
    std::fs::write(data_dir.join("dataset.jsonl"), "{not json\n").unwrap();
    let o = stage(out, &["train-teacher"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("diagnostics.txt").exists());
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["verify"]);
    assert!(stdout.contains("PASS heun-order"), "{stdout}");
    assert!(stdout.contains("PASS boundary-identities"), "{stdout}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["gen-data", "--config"])
        .arg(smoke_config())
        .env("TRAJDISTILL_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(std::fs::read_dir(dir.path()).unwrap().count() > 0);
}
