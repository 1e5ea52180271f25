use std::fs;
use std::path::Path;

use bsde_stopping::cli::{run, CliError};
use bsde_stopping::config::{self, preset_names, ConfigError, ExperimentConfig};

const TINY: &str = r#"
preset = "geobask-d3"
name = "tiny"
steps = 4
horizon = 0.5
batch = 128
steps_per_epoch = 4
widths = [8, 8]
lower_paths = 2000
upper_paths = 200
substeps = 4
refine_levels = [1, 4]
"#;

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn cli(args: &[&str]) -> Result<(), CliError> {
    run(std::iter::once("bsde-stopping").chain(args.iter().copied()))
}

#[test]
fn every_preset_builds_a_problem() {
    for name in preset_names() {
        let cfg = config::preset(&name).unwrap();
        cfg.validate().unwrap();
        let problem = cfg.problem().unwrap();
        assert_eq!(problem.dim(), cfg.dim, "{name}");
        let reduced = cfg.clone().reduced();
        assert_eq!((reduced.batch, reduced.steps_per_epoch), (4096, 150));
        assert_ne!(reduced.hash(), cfg.hash());
    }
    assert!(matches!(config::preset("geobask-d7"), Err(ConfigError::UnknownPreset(_))));
}

#[test]
fn toml_overrides_and_hash_stability() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    assert_eq!(cfg.steps, 4);
    assert_eq!(cfg.dim, 3);
    let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
    let mut bounds_only = cfg.clone();
    bounds_only.bound_seed += 1;
    bounds_only.lower_paths *= 2;
    assert_eq!(bounds_only.training_hash(), cfg.training_hash());
    assert_ne!(bounds_only.hash(), cfg.hash());
}

#[test]
fn malformed_configs_are_reported() {
    let err = ExperimentConfig::parse("preset = \"geobask-d3\"\nbogus_key = 1\n").unwrap_err();
    assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
    let err = ExperimentConfig::parse("preset = \"geobask-d3\"\nsteps = 0\nbatch = 0\n").unwrap_err();
    match err {
        ConfigError::Validation(list) => assert!(list.len() >= 2, "{list:?}"),
        other => panic!("{other}"),
    }
}

#[test]
fn bound_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out = dir.path().join("out").display().to_string();
    let err = cli(&["bound-lower", "--config", &config, "--out", &out]).unwrap_err();
    assert!(matches!(err, CliError::CheckpointMissing(_)));
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("checkpoint missing"));
    let json: serde_json::Value = serde_json::from_str(&err.to_json()).unwrap();
    assert_eq!(json["exit_code"], 3);
}

#[test]
fn config_errors_exit_with_two() {
    let err = cli(&["train", "--preset", "nope"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = cli(&["train"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = cli(&["frobnicate"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn train_then_bound_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out = dir.path().join("out");
    let o = out.display().to_string();
    cli(&["train", "--config", &config, "--out", &o]).unwrap();
    assert!(out.join("checkpoint/manifest.json").exists());
    let report = fs::read_to_string(out.join("training_report.csv")).unwrap();
    let hash = ExperimentConfig::parse(TINY).unwrap().hash();
    assert!(report.lines().nth(1).unwrap().starts_with(&hash));

    cli(&["bound-lower", "--config", &config, "--out", &o]).unwrap();
    cli(&["bound-upper", "--config", &config, "--out", &o, "--paths", "100"]).unwrap();
    let lower = fs::read_to_string(out.join("lower.csv")).unwrap();
    let upper = fs::read_to_string(out.join("upper.csv")).unwrap();
    assert_eq!(lower.lines().count(), 2);
    assert_eq!(upper.lines().count(), 3);
    assert!(lower.contains(&hash));
    cli(&["delta", "--config", &config, "--out", &o, "--step", "2", "--paths", "50"]).unwrap();
    assert_eq!(fs::read_to_string(out.join("delta_k2.csv")).unwrap().lines().count(), 51);
}

#[test]
fn run_experiment_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out = dir.path().join("run");
    cli(&["run-experiment", "--config", &config, "--out", &out.display().to_string(), "--threads", "1"]).unwrap();
    for f in ["results.csv", "training_report.csv", "config.toml", "checkpoint/manifest.json", "checkpoint/tensors.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4);
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    let reparsed = ExperimentConfig::parse(&saved).unwrap();
    assert_eq!(reparsed, ExperimentConfig::parse(TINY).unwrap());
}

#[test]
fn simulate_writes_a_readable_dump() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let o = dir.path().display().to_string();
    cli(&["simulate", "--config", &config, "--out", &o, "--paths", "64", "--fine-grid", "2"]).unwrap();
    let paths = bsde_stopping::market::read_dump(&dir.path().join("paths.bin")).unwrap();
    assert_eq!(paths.count(), 64);
    assert_eq!(paths.substeps(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.problem().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn reduced_file_matches_reduced_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/geobask-d3-reduced.toml");
    let file = ExperimentConfig::load(&path).unwrap();
    assert_eq!(file, config::preset("geobask-d3").unwrap().reduced());
}
