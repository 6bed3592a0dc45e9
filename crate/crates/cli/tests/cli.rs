use std::path::Path;
use std::process::{Command, Output};

use strata_core::pipeline::PipelineConfig;
use strata_core::select::QuotaConfig;
use strata_core::synth::stratified_signals;

fn strata(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strata"))
        .args(args)
        .current_dir(dir)
        .env("STRATA_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let dict = [40, 40, 40];
    let mut c = PipelineConfig::default();
    c.synth.n_participants = 600;
    c.synth.n_concepts_per_domain = dict;
    c.synth.planted_signals = stratified_signals(dict, 1, 0.6, 0.05);
    c.selection.quotas = QuotaConfig {
        conditions: 15,
        procedures: 15,
        medications: 15,
    };
    c.selection.k = 10;
    c.selection.stage2_params.n_estimators = 10;
    c.tuning.space.dimensions[0].low = 10.0;
    c.tuning.space.dimensions[0].high = 20.0;
    c.tuning.tpe.n_trials = 2;
    c.tuning.tpe.n_startup = 1;
    c.evaluation.folds = 3;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_before_train_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let o = strata(&["eval", "--config", &cfg, "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("models/global.json") && msg.contains("`train`"), "{msg}");
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"tuning": {"tpe": {"gamma_fraction": 2.0}}}"#).unwrap();
    let o = strata(&["run", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma_fraction"), "{}", stderr(&o));

    std::fs::write(&path, "{ not json").unwrap();
    let o = strata(&["run", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = strata(&["fit"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = strata(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn config_subcommand_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = strata(&["config", "--seed", "42", "--paper-mode", "--workers", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let c: PipelineConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c.seed, 42);
    assert_eq!(c.workers, 2);
    assert!(c.selection.paper_mode);
}

#[test]
fn run_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = strata(&["run", "--config", &cfg, "--out", out, "--seed", "3"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("a/report.md").exists());

    let o = strata(&["report", "--config", &cfg, "--out", "a", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("a/report.json")).unwrap(), a);
}
