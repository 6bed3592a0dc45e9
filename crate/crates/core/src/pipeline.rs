//! Staged pipeline driver. Every stage reads its inputs from the output
//! directory, writes its own artifacts there and records a SHA-256 stamp of
//! its config blocks and upstream stamps under `.stamps/`. A stage whose
//! stamp is unchanged and whose artifacts exist is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boosting::{train, GbdtModel, GbdtParams};
use crate::cohort::{match_controls, phenotype, read_cohort, write_cohort, CohortLabel, CovariateBalance, PhenotypeConfig, PropensityModel};
use crate::ehr::{load_store, EventStore, PersonId};
use crate::error::{Error, Result};
use crate::evaluate::{
    assign_stratum, benchmark_report, render_markdown, statistics_from_counts, tune_regime, CvContext,
    EvaluationConfig, FeatureSource, GroupReport, Regime, Report, ReportSeeds, SelectionSummary, Stratum,
    TuningConfig, TuningSummary,
};
use crate::featurize::{encode_recency, strip_leakage, RecencyFeatureMatrix, DEFAULT_WINDOW_DAYS, SENTINEL};
use crate::rng::substream_seed;
use crate::select::{
    count_significant, read_selected, select_features, write_heterogeneity, write_selected, SelectionConfig, Stage as SelectStage,
};
use crate::synth::{generate, SynthConfig, DEFAULT_CRS_CODES};
use crate::tune::write_trials;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding participants.csv and events.csv. When absent the
    /// `synth` stage writes a synthetic cohort into `out`.
    pub input: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    /// Look-back for the visit-frequency covariate.
    pub window_days: u32,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            window_days: DEFAULT_WINDOW_DAYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub window_days: u32,
    pub sentinel: u32,
    /// Drop phenotype codes from the feature matrix.
    pub strip_leakage: bool,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            window_days: DEFAULT_WINDOW_DAYS,
            sentinel: SENTINEL,
            strip_leakage: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub phenotype: PhenotypeConfig,
    pub matching: MatchingConfig,
    pub featurize: FeaturizeConfig,
    pub selection: SelectionConfig,
    pub model: GbdtParams,
    pub tuning: TuningConfig,
    pub evaluation: EvaluationConfig,
    /// Master seed. Stage seeds inside the blocks are overwritten from it.
    pub seed: u64,
    /// Thread count; 0 uses every core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            phenotype: PhenotypeConfig {
                crs_code_set: DEFAULT_CRS_CODES.iter().map(|s| s.to_string()).collect(),
                ..PhenotypeConfig::default()
            },
            matching: MatchingConfig::default(),
            featurize: FeaturizeConfig::default(),
            selection: SelectionConfig::default(),
            model: GbdtParams::default(),
            tuning: TuningConfig::default(),
            evaluation: EvaluationConfig::default(),
            seed: 0,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.phenotype.validate()?;
        if self.matching.window_days == 0 {
            return Err(Error::config("matching.window_days", "must be positive"));
        }
        if self.featurize.window_days == 0 {
            return Err(Error::config("featurize.window_days", "must be positive"));
        }
        if self.featurize.sentinel != SENTINEL {
            return Err(Error::config(
                "featurize.sentinel",
                format!("only {SENTINEL} is supported"),
            ));
        }
        if self.featurize.window_days >= SENTINEL {
            return Err(Error::config("featurize.window_days", "must be below the sentinel"));
        }
        self.selection.validate()?;
        self.model.validate().map_err(|e| prefix("model", e))?;
        self.tuning.validate()?;
        self.evaluation.validate()?;
        Ok(())
    }

    /// Seeds handed to each stage.
    pub fn derived_seeds(&self) -> BTreeMap<String, u64> {
        ["synth", "select", "select.stage2", "model", "tune", "cv"]
            .into_iter()
            .map(|name| (name.to_string(), substream_seed(self.seed, name, 0)))
            .collect()
    }

    /// The config with every nested seed replaced by its master-derived value.
    pub fn effective(&self) -> Self {
        let seeds = self.derived_seeds();
        let mut c = self.clone();
        c.synth.seed = seeds["synth"];
        c.selection.stage2_params.seed = seeds["select.stage2"];
        c.model.seed = seeds["model"];
        c.tuning.tpe.seed = seeds["tune"];
        c
    }

    /// Config echo for the report: everything except paths and workers,
    /// neither of which may change results.
    pub fn echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self.effective())?;
        if let Some(map) = v.as_object_mut() {
            map.remove("paths");
            map.remove("workers");
        }
        Ok(v)
    }
}

fn prefix(block: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { field, message } => Error::InvalidConfig {
            field: format!("{block}.{field}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Phenotype,
    Match,
    Encode,
    Select,
    Tune,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Phenotype,
        Stage::Match,
        Stage::Encode,
        Stage::Select,
        Stage::Tune,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Phenotype => "phenotype",
            Stage::Match => "match",
            Stage::Encode => "encode",
            Stage::Select => "select",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Phenotype => &[],
            Stage::Match => &[Stage::Phenotype],
            Stage::Encode => &[Stage::Match],
            Stage::Select => &[Stage::Encode],
            Stage::Tune => &[Stage::Select],
            Stage::Train => &[Stage::Tune],
            Stage::Eval => &[Stage::Train],
            Stage::Report => &[Stage::Eval],
        }
    }

    /// Files the stage writes, relative to the output directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["participants.csv", "events.csv", "ground_truth.csv", "planted_concepts.csv"],
            Stage::Phenotype => &["targets.csv"],
            Stage::Match => &["cohort.csv", "matching.json"],
            Stage::Encode => &["features.csv", "feature_columns.csv", "strata.csv", "leakage.json"],
            Stage::Select => &["selected_features.csv", "heterogeneity.csv", "selection.json"],
            Stage::Tune => &["folds.json", "tuning.json"],
            Stage::Train => &["models/global.json"],
            Stage::Eval => &["evaluation.json"],
            Stage::Report => &["report.json", "report.md"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatchingArtifact {
    model: PropensityModel,
    pairs: usize,
    unmatched_targets: Vec<PersonId>,
    balance: Vec<CovariateBalance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FoldsArtifact {
    folds: Vec<usize>,
    features: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TuningArtifact {
    params: BTreeMap<Regime, GbdtParams>,
    summaries: Vec<TuningSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LeakageArtifact {
    removed: Vec<String>,
    emptied: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    effective: PipelineConfig,
    pool: rayon::ThreadPool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, stage, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn missing_or_io(path: &Path, stage: Stage, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.as_str(),
        }
    } else {
        Error::io(path, e)
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.as_str(),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self {
            effective: config.effective(),
            config,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.paths.out
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.out.join(name)
    }

    fn data_dir(&self) -> &Path {
        self.config.paths.input.as_deref().unwrap_or(&self.config.paths.out)
    }

    /// Producer of the raw participant and event files.
    fn data_stage(&self) -> Stage {
        Stage::Synth
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out(".stamps").join(stage.as_str())
    }

    fn hash_files(&self, paths: &[PathBuf]) -> Result<Vec<u8>> {
        let mut h = Sha256::new();
        for p in paths {
            let bytes = fs::read(p).map_err(|e| missing_or_io(p, self.data_stage(), e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(h.finalize().to_vec())
    }

    fn config_blocks(&self, stage: Stage) -> Result<Vec<serde_json::Value>> {
        let c = &self.effective;
        fn v<T: Serialize>(x: &T) -> Result<serde_json::Value> {
            Ok(serde_json::to_value(x)?)
        }
        Ok(match stage {
            Stage::Synth => vec![v(&c.synth)?],
            Stage::Phenotype => vec![v(&c.phenotype)?],
            Stage::Match => vec![v(&c.matching)?],
            Stage::Encode => vec![v(&c.featurize)?, v(&c.phenotype.crs_code_set)?],
            Stage::Select => vec![v(&c.selection)?, v(&c.seed)?],
            Stage::Tune => vec![v(&c.selection)?, v(&c.model)?, v(&c.tuning)?, v(&c.evaluation.folds)?, v(&c.seed)?],
            Stage::Train => vec![v(&c.model)?],
            Stage::Eval => vec![v(&c.evaluation)?],
            Stage::Report => vec![c.echo()?],
        })
    }

    /// Hash of the stage's config blocks and its inputs' stamps.
    fn compute_stamp(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.as_str().as_bytes());
        for block in self.config_blocks(stage)? {
            h.update(serde_json::to_vec(&block)?);
            h.update([0u8]);
        }
        match stage {
            Stage::Synth => {}
            Stage::Phenotype => {
                let dir = self.data_dir();
                h.update(self.hash_files(&[dir.join("participants.csv"), dir.join("events.csv")])?);
            }
            _ => {
                for &up in stage.upstream() {
                    let path = self.stamp_path(up);
                    let primary = self.out(up.outputs()[0]);
                    let stamp = fs::read_to_string(&path).map_err(|e| missing_or_io(&primary, up, e))?;
                    h.update(stamp.as_bytes());
                }
            }
        }
        Ok(hex(&h.finalize()))
    }

    fn is_current(&self, stage: Stage, stamp: &str) -> bool {
        let recorded = fs::read_to_string(self.stamp_path(stage)).ok();
        recorded.as_deref() == Some(stamp) && stage.outputs().iter().all(|o| self.out(o).exists())
    }

    /// Runs one stage inside the worker pool, skipping it when cached.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        fs::create_dir_all(self.out(".stamps")).map_err(|e| Error::io(self.out(".stamps"), e))?;
        if stage == Stage::Synth && self.config.paths.input.is_some() {
            log::info!("synth: skipped, reading input from {}", self.data_dir().display());
            return Ok(StageOutcome::Cached);
        }
        let stamp = self.compute_stamp(stage)?;
        if self.is_current(stage, &stamp) {
            log::info!("{stage}: cached");
            return Ok(StageOutcome::Cached);
        }
        log::info!("{stage}: running");
        let _ = fs::remove_file(self.stamp_path(stage));
        self.pool.install(|| self.execute(stage))?;
        fs::write(self.stamp_path(stage), &stamp).map_err(|e| Error::io(self.stamp_path(stage), e))?;
        Ok(StageOutcome::Ran)
    }

    /// Every stage in order.
    pub fn run(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Phenotype => self.phenotype(),
            Stage::Match => self.matching(),
            Stage::Encode => self.encode(),
            Stage::Select => self.select(),
            Stage::Tune => self.tune(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
    }

    fn load_store(&self) -> Result<EventStore> {
        let dir = self.data_dir();
        let (p, e) = (dir.join("participants.csv"), dir.join("events.csv"));
        require(&p, self.data_stage())?;
        require(&e, self.data_stage())?;
        load_store(&p, &e)
    }

    fn synth(&self) -> Result<()> {
        let data = generate(&self.effective.synth)?;
        data.write(self.out_dir())?;
        log::info!(
            "synth: {} participants, {} events",
            data.store.participants().len(),
            data.store.n_events()
        );
        Ok(())
    }

    fn phenotype(&self) -> Result<()> {
        let store = self.load_store()?;
        let targets = phenotype(&store, &self.effective.phenotype)?;
        log::info!("phenotype: {} targets", targets.len());
        write_cohort(&self.out("targets.csv"), &targets)
    }

    fn read_cohort_artifact(&self, name: &str, stage: Stage) -> Result<Vec<CohortLabel>> {
        let path = self.out(name);
        require(&path, stage)?;
        read_cohort(&path)
    }

    fn matching(&self) -> Result<()> {
        let store = self.load_store()?;
        let targets = self.read_cohort_artifact("targets.csv", Stage::Phenotype)?;
        let matched = match_controls(&store, &targets, self.effective.matching.window_days)?;
        log::info!(
            "match: {} pairs, {} unmatched targets",
            matched.result.pairs.len(),
            matched.result.unmatched_targets.len()
        );
        write_cohort(&self.out("cohort.csv"), &matched.cohort)?;
        write_json(
            &self.out("matching.json"),
            &MatchingArtifact {
                model: matched.model,
                pairs: matched.result.pairs.len(),
                unmatched_targets: matched.result.unmatched_targets,
                balance: matched.balance,
            },
        )
    }

    fn encode(&self) -> Result<()> {
        let store = self.load_store()?;
        let cohort = self.read_cohort_artifact("cohort.csv", Stage::Match)?;
        let full = encode_recency(&store, &cohort, self.effective.featurize.window_days)?;
        let (matrix, leakage) = if self.effective.featurize.strip_leakage {
            let (m, r) = strip_leakage(&full, &self.effective.phenotype.crs_code_set);
            (m, LeakageArtifact { removed: r.removed, emptied: r.emptied })
        } else {
            (full, LeakageArtifact { removed: Vec::new(), emptied: false })
        };
        log::info!("encode: {} rows x {} concepts, {} cells", matrix.n_rows(), matrix.n_cols(), matrix.nnz());
        matrix.write_triplets(&self.out("features.csv"))?;
        matrix.write_columns(&self.out("feature_columns.csv"))?;
        let mut w = csv::Writer::from_path(self.out("strata.csv"))?;
        w.write_record(["person_id", "stratum"])?;
        for c in &cohort {
            let s = assign_stratum(store.participant(c.person_id)?, c.index_date);
            w.write_record([c.person_id.to_string(), s.map_or_else(|| "remainder".to_string(), Stratum::key)])?;
        }
        w.flush().map_err(|e| Error::io(self.out("strata.csv"), e))?;
        write_json(&self.out("leakage.json"), &leakage)
    }

    fn load_matrix(&self) -> Result<(Vec<CohortLabel>, RecencyFeatureMatrix, Vec<Option<Stratum>>)> {
        let cohort = self.read_cohort_artifact("cohort.csv", Stage::Match)?;
        let (triplets, columns, strata_path) = (
            self.out("features.csv"),
            self.out("feature_columns.csv"),
            self.out("strata.csv"),
        );
        for p in [&triplets, &columns, &strata_path] {
            require(p, Stage::Encode)?;
        }
        let matrix = RecencyFeatureMatrix::read(&triplets, &columns, &cohort, self.effective.featurize.window_days)?;
        let mut by_person: BTreeMap<PersonId, Option<Stratum>> = BTreeMap::new();
        let mut r = csv::Reader::from_path(&strata_path)?;
        for rec in r.records() {
            let rec = rec?;
            let id: u64 = rec[0]
                .parse()
                .map_err(|_| Error::SchemaMismatch(format!("bad person id {:?} in strata.csv", &rec[0])))?;
            let s = match &rec[1] {
                "remainder" => None,
                key => Some(
                    Stratum::parse(key)
                        .ok_or_else(|| Error::SchemaMismatch(format!("unknown stratum {key:?} in strata.csv")))?,
                ),
            };
            by_person.insert(PersonId(id), s);
        }
        let strata = matrix
            .row_ids()
            .iter()
            .map(|id| {
                by_person
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::SchemaMismatch(format!("person {id} missing from strata.csv")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((cohort, matrix, strata))
    }

    fn select(&self) -> Result<()> {
        let (_, matrix, strata) = self.load_matrix()?;
        let cfg = &self.effective.selection;
        let seed = self.effective.derived_seeds()["select"];
        let selection = select_features(&matrix, cfg, seed)?;
        let final_matrix = matrix.select_codes(&selection.stage2.codes())?;
        let (significant, tests) = count_significant(&final_matrix, &strata, cfg.alpha)?;
        log::info!(
            "select: stage 1 kept {}, stage 2 kept {}, {significant} of {} heterogeneous",
            selection.stage1.len(),
            selection.stage2.len(),
            tests.len()
        );
        write_selected(&self.out("selected_features.csv"), &[&selection.stage1, &selection.stage2])?;
        write_heterogeneity(&self.out("heterogeneity.csv"), &tests)?;
        let mut by_domain: BTreeMap<String, usize> = BTreeMap::new();
        for f in &selection.stage1.features {
            *by_domain.entry(f.domain.as_str().to_string()).or_default() += 1;
        }
        write_json(
            &self.out("selection.json"),
            &SelectionSummary {
                paper_mode: cfg.paper_mode,
                stage1: selection.stage1.len(),
                stage2: selection.stage2.len(),
                stage1_by_domain: by_domain,
                heterogeneity_tested: tests.len(),
                heterogeneity_significant: significant,
                alpha: cfg.alpha,
            },
        )
    }

    fn final_features(&self) -> Result<Vec<String>> {
        let path = self.out("selected_features.csv");
        require(&path, Stage::Select)?;
        Ok(read_selected(&path, SelectStage::Stage2)?.codes())
    }

    fn cv_context(&self, matrix: &RecencyFeatureMatrix, strata: &[Option<Stratum>], source: FeatureSource<'_>) -> Result<CvContext> {
        let seed = self.effective.derived_seeds()["cv"];
        CvContext::build(matrix, strata, self.effective.evaluation.folds, source, seed)
    }

    fn tune(&self) -> Result<()> {
        let (_, matrix, strata) = self.load_matrix()?;
        let fixed = self.final_features()?;
        let cfg = &self.effective;
        let source = if cfg.selection.paper_mode {
            FeatureSource::Fixed(&fixed)
        } else {
            FeatureSource::SelectInFold(&cfg.selection)
        };
        let ctx = self.cv_context(&matrix, &strata, source)?;
        let trials_dir = self.out("trials");
        fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
        let mut params = BTreeMap::new();
        let mut summaries = Vec::new();
        for regime in Regime::all() {
            if !ctx.is_viable(regime) {
                log::warn!("tune: {regime} has fewer than two rows of a class; skipped");
                continue;
            }
            let t = tune_regime(&ctx, regime, &cfg.model, &cfg.tuning)?;
            write_trials(&trials_dir.join(format!("{}.csv", regime.key())), &cfg.tuning.space, &t.trials)?;
            summaries.push(TuningSummary {
                regime: regime.key(),
                n_trials: t.trials.len(),
                n_failed: t.trials.iter().filter(|x| !x.is_complete()).count(),
                best_trial: t.best_trial.index,
                best_mean_fold_auc: t.best_trial.objective,
            });
            params.insert(regime, t.best);
        }
        write_json(
            &self.out("folds.json"),
            &FoldsArtifact {
                folds: ctx.folds().to_vec(),
                features: ctx.fold_features(),
            },
        )?;
        write_json(&self.out("tuning.json"), &TuningArtifact { params, summaries })
    }

    fn tuned(&self) -> Result<TuningArtifact> {
        read_json(&self.out("tuning.json"), Stage::Tune)
    }

    fn train(&self) -> Result<()> {
        let (_, matrix, strata) = self.load_matrix()?;
        let tuning = self.tuned()?;
        let features = self.final_features()?;
        let sub = matrix.select_codes(&features)?;
        let dir = self.out("models");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (regime, params) in &tuning.params {
            let rows: Vec<usize> = (0..sub.n_rows())
                .filter(|&i| match regime {
                    Regime::Global => true,
                    Regime::Stratum(s) => strata[i] == Some(*s),
                })
                .collect();
            let part = sub.select_rows(&rows);
            let model = train(&part.to_dataset(), part.labels(), params)?;
            model.save(&dir.join(format!("{}.json", regime.key())))?;
        }
        log::info!("train: {} models", tuning.params.len());
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        require(&self.out("models/global.json"), Stage::Train)?;
        GbdtModel::load(&self.out("models/global.json"))?;
        let (_, matrix, strata) = self.load_matrix()?;
        let tuning = self.tuned()?;
        let folds: FoldsArtifact = read_json(&self.out("folds.json"), Stage::Tune)?;
        let ctx = self.cv_context(&matrix, &strata, FeatureSource::PerFold(&folds.features))?;
        if ctx.folds() != folds.folds.as_slice() {
            return Err(Error::SchemaMismatch("fold assignment differs from the tune stage".into()));
        }
        let report = benchmark_report(&ctx, &tuning.params, &self.effective.evaluation)?;
        if let Some(t) = &report.total {
            log::info!(
                "eval: weighted AUC global {:.4}, stratified {:.4}, delta {:+.4}",
                t.auc_global,
                t.auc_group,
                t.delta
            );
        }
        write_json(&self.out("evaluation.json"), &report)
    }

    fn report(&self) -> Result<()> {
        let evaluation: GroupReport = read_json(&self.out("evaluation.json"), Stage::Eval)?;
        let matching: MatchingArtifact = read_json(&self.out("matching.json"), Stage::Match)?;
        let selection: SelectionSummary = read_json(&self.out("selection.json"), Stage::Select)?;
        let tuning = self.tuned()?;
        let (_, matrix, strata) = self.load_matrix()?;
        let mut counts = [(0usize, 0usize); 7];
        for (s, &target) in strata.iter().zip(matrix.labels()) {
            let slot = s.map_or(6, Stratum::index);
            counts[slot].0 += 1;
            counts[slot].1 += usize::from(target);
        }
        let report = Report {
            config: self.config.echo()?,
            seeds: ReportSeeds {
                master: self.config.seed,
                derived: self.config.derived_seeds(),
            },
            cohort: statistics_from_counts(&counts),
            balance: matching.balance,
            unmatched_targets: matching.unmatched_targets.len(),
            selection,
            tuning: tuning.summaries,
            benchmark: evaluation,
        };
        write_json(&self.out("report.json"), &report)?;
        fs::write(self.out("report.md"), render_markdown(&report)).map_err(|e| Error::io(self.out("report.md"), e))
    }
}

#[cfg(test)]
mod tests;
