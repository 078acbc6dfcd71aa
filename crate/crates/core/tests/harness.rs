use std::path::{Path, PathBuf};

use trajdistill::harness::{load_config, verify_suite, EnvChoice, ExperimentConfig, Pipeline};
use trajdistill::planeval::AblationCell;
use trajdistill::Error;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> ExperimentConfig {
    load_config(&config_dir().join("smoke.toml")).unwrap().0
}

#[test]
fn shipped_configs_load_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            let (cfg, hash) = load_config(&path).unwrap();
            assert_eq!(hash, cfg.hash().unwrap(), "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn every_config_problem_is_reported_at_once() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_episodes = 0;
    cfg.reward.gamma = 1.5;
    cfg.bench.trials = 0;
    cfg.plan.c = 1000;
    match cfg.validate() {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 4, "{errs:?}"),
        other => panic!("expected config errors, got {other:?}"),
    }
    let maze = ExperimentConfig {
        env: EnvChoice::PointmassMaze { horizon: 50 },
        ..ExperimentConfig::default()
    };
    assert!(maze.validate().is_err());
}

#[test]
fn missing_config_file_is_a_missing_artifact() {
    let err = load_config(Path::new("/nonexistent/cfg.toml")).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(), dir.path().to_path_buf());
    assert!(matches!(
        p.train_teacher(),
        Err(Error::MissingArtifact { .. })
    ));
    p.gen_data().unwrap();
    assert!(matches!(p.distill(), Err(Error::MissingArtifact { .. })));
    assert!(matches!(p.eval(), Err(Error::MissingArtifact { .. })));
}

#[test]
fn finished_stages_are_reused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke(), dir.path().to_path_buf());
    p.gen_data().unwrap();
    let (t1, _) = p.train_teacher().unwrap();
    let ckpt = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|d| {
            d.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("teacher-")
        })
        .unwrap()
        .join("teacher.ckpt");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    let (t2, _) = p.train_teacher().unwrap();
    assert_eq!(t1, t2);
    assert_eq!(
        std::fs::metadata(&ckpt).unwrap().modified().unwrap(),
        before
    );
    p.force = true;
    let (t3, _) = p.train_teacher().unwrap();
    assert_eq!(t1, t3);
}

#[test]
fn ablation_grid_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    let cell = |name: &str, reward_weight: f64, teacher_reward_weight: f64| AblationCell {
        name: name.into(),
        reward_weight,
        dsm_weight: 1.0,
        teacher_reward_weight,
        h: 1,
        c: 4,
    };
    cfg.ablation = vec![
        cell("ctd", 0.0, 0.0),
        cell("ractd", 0.1, 0.0),
        cell("teacher", 0.0, 0.3),
    ];
    let p = Pipeline::new(cfg, dir.path().to_path_buf());
    let csv = std::fs::read_to_string(p.ablate().unwrap()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    for (line, name) in lines[1..].iter().zip(["ctd", "ractd", "teacher"]) {
        assert!(line.starts_with(&format!("{name},")));
        assert!(line.ends_with(','), "cell {name} failed: {line}");
    }
    let empty = Pipeline::new(smoke(), dir.path().to_path_buf());
    assert!(matches!(empty.ablate(), Err(Error::Config(_))));
}

#[test]
fn verify_suite_passes() {
    let checks = verify_suite(0).unwrap();
    assert_eq!(checks.len(), 2);
    assert!(checks.iter().all(|c| c.passed), "{checks:?}");
}
