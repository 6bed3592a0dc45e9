use super::*;
use crate::select::QuotaConfig;
use crate::synth::stratified_signals;
use crate::tune::TpeConfig;

fn tiny(out: &Path) -> PipelineConfig {
    let dict = [40, 40, 40];
    let mut c = PipelineConfig::default();
    c.paths.out = out.to_path_buf();
    c.synth.n_participants = 700;
    c.synth.n_concepts_per_domain = dict;
    c.synth.planted_signals = stratified_signals(dict, 1, 0.6, 0.05);
    c.selection.quotas = QuotaConfig {
        conditions: 15,
        procedures: 15,
        medications: 15,
    };
    c.selection.k = 12;
    c.selection.stage2_params.n_estimators = 15;
    c.model.n_estimators = 15;
    c.tuning.space.dimensions[0].low = 10.0;
    c.tuning.space.dimensions[0].high = 30.0;
    c.tuning.tpe = TpeConfig {
        n_trials: 2,
        n_startup: 1,
        ..TpeConfig::default()
    };
    c.evaluation.folds = 3;
    c.seed = 5;
    c
}

#[test]
fn default_config_validates_and_round_trips() {
    let c = PipelineConfig::default();
    c.validate().unwrap();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), c);
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
}

#[test]
fn config_errors_name_the_field() {
    let err = PipelineConfig::from_json(r#"{"evaluation": {"folds": 1}}"#)
        .unwrap()
        .validate()
        .unwrap_err();
    assert!(err.to_string().contains("evaluation.folds"), "{err}");
    assert!(err.is_validation());

    let err = PipelineConfig::from_json(r#"{"featurize": {"sentinel": 5}}"#)
        .unwrap()
        .validate()
        .unwrap_err();
    assert!(err.to_string().contains("featurize.sentinel"), "{err}");

    let err = PipelineConfig::from_json(r#"{"selection": {"kk": 3}}"#).unwrap_err();
    assert!(err.to_string().contains("kk"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn effective_seeds_follow_master() {
    let mut a = PipelineConfig::default();
    a.seed = 1;
    let mut b = a.clone();
    b.synth.seed = 999;
    assert_eq!(a.effective(), b.effective());
    b.seed = 2;
    assert_ne!(a.effective().synth.seed, b.effective().synth.seed);
    let echo = a.echo().unwrap();
    assert!(echo.get("paths").is_none() && echo.get("workers").is_none());
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(Stage::parse(s.as_str()), Some(s));
    }
    assert_eq!(Stage::parse("fit"), None);
}

#[test]
fn stages_require_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path())).unwrap();
    match p.run_stage(Stage::Eval).unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "train"),
        e => panic!("unexpected {e}"),
    }
    match p.run_stage(Stage::Phenotype).unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "synth"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn run_is_cached_deterministic_and_invalidated_by_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = Pipeline::new(tiny(a.path())).unwrap();
    pa.run().unwrap();
    for stage in Stage::ALL {
        assert_eq!(pa.run_stage(stage).unwrap(), StageOutcome::Cached, "{stage}");
    }

    let mut cb = tiny(b.path());
    cb.workers = 3;
    Pipeline::new(cb.clone()).unwrap().run().unwrap();
    let report_a = fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(report_a, fs::read(b.path().join("report.json")).unwrap());

    cb.evaluation.threshold = 0.4;
    let pb = Pipeline::new(cb).unwrap();
    assert_eq!(pb.run_stage(Stage::Tune).unwrap(), StageOutcome::Cached);
    assert_eq!(pb.run_stage(Stage::Train).unwrap(), StageOutcome::Cached);
    assert_eq!(pb.run_stage(Stage::Eval).unwrap(), StageOutcome::Ran);
    assert_eq!(pb.run_stage(Stage::Report).unwrap(), StageOutcome::Ran);

    let report: Report = serde_json::from_slice(&report_a).unwrap();
    assert_eq!(report.seeds.master, 5);
    assert_eq!(report.cohort.total.n, report.benchmark.rows.iter().map(|r| r.n).sum::<usize>() + report.benchmark.remainder_n);
    assert!(report.benchmark.overall_global.auc > 0.5);
    assert!(a.path().join("models/global.json").exists());
    assert!(a.path().join("trials/global.csv").exists());
}

#[test]
fn input_directory_skips_synth() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut c = tiny(data.path());
    Pipeline::new(c.clone()).unwrap().run_stage(Stage::Synth).unwrap();
    c.paths.input = Some(data.path().to_path_buf());
    c.paths.out = out.path().to_path_buf();
    let p = Pipeline::new(c).unwrap();
    assert_eq!(p.run_stage(Stage::Synth).unwrap(), StageOutcome::Cached);
    p.run_stage(Stage::Phenotype).unwrap();
    assert!(out.path().join("targets.csv").exists());
    assert!(!out.path().join("events.csv").exists());
}
