//! Cross-validated comparison of one global model against six stratum
//! models, each with its own tuned parameters.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{auc, roc_points, stratified_kfold_by, thin_curve, threshold_metrics, weighted_total, Metrics, Stratum};
use crate::boosting::{train, Dataset, GbdtParams};
use crate::error::{Error, Result};
use crate::featurize::RecencyFeatureMatrix;
use crate::rng::substream_seed;
use crate::select::{select_features, SelectionConfig};
use crate::tune::{optimize, SearchSpace, TpeConfig, Trial};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub folds: usize,
    pub threshold: f64,
    /// Upper bound on stored ROC points per curve.
    pub roc_points: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            threshold: super::DEFAULT_THRESHOLD,
            roc_points: 201,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config("evaluation.folds", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("evaluation.threshold", "must lie in [0, 1]"));
        }
        if self.roc_points < 2 {
            return Err(Error::config("evaluation.roc_points", "must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub space: SearchSpace,
    pub tpe: TpeConfig,
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        self.space.validate_for_gbdt()?;
        self.tpe.validate()
    }
}

/// A training regime: the whole cohort or one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Global,
    Stratum(Stratum),
}

impl Regime {
    pub fn all() -> Vec<Regime> {
        std::iter::once(Regime::Global)
            .chain(Stratum::ALL.into_iter().map(Regime::Stratum))
            .collect()
    }

    pub fn key(self) -> String {
        match self {
            Regime::Global => "global".to_string(),
            Regime::Stratum(s) => s.key(),
        }
    }

    pub fn parse(key: &str) -> Option<Self> {
        if key == "global" {
            Some(Regime::Global)
        } else {
            Stratum::parse(key).map(Regime::Stratum)
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Global => f.write_str("Global"),
            Regime::Stratum(s) => s.fmt(f),
        }
    }
}

impl Serialize for Regime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let key = String::deserialize(d)?;
        Regime::parse(&key).ok_or_else(|| serde::de::Error::custom(format!("unknown regime {key:?}")))
    }
}

/// Where each fold's feature set comes from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// One set for every fold (selected once on the full cohort).
    Fixed(&'a [String]),
    /// Precomputed per-fold sets.
    PerFold(&'a [Vec<String>]),
    /// Run both selection stages on each training fold.
    SelectInFold(&'a SelectionConfig),
}

pub struct FoldData {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub features: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Shared fold assignment and per-fold feature matrices.
pub struct CvContext {
    labels: Vec<bool>,
    strata: Vec<Option<Stratum>>,
    folds: Vec<usize>,
    fold_data: Vec<FoldData>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// Out-of-fold probability for every regime member, `None` elsewhere.
    pub oof: Vec<Option<f64>>,
    /// AUC on each fold's held-out regime members, when both classes occur.
    pub fold_aucs: Vec<Option<f64>>,
}

impl CvContext {
    /// Folds are stratified on (stratum, label) so every stratum model sees
    /// a balanced split of its own rows.
    pub fn build(
        matrix: &RecencyFeatureMatrix,
        strata: &[Option<Stratum>],
        k: usize,
        features: FeatureSource<'_>,
        seed: u64,
    ) -> Result<Self> {
        if strata.len() != matrix.n_rows() {
            return Err(Error::SchemaMismatch(format!(
                "{} strata for {} rows",
                strata.len(),
                matrix.n_rows()
            )));
        }
        let labels = matrix.labels().to_vec();
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos.min(labels.len() - n_pos) < k {
            return Err(Error::InvalidArgument(format!(
                "cohort has {n_pos} targets and {} controls; {k}-fold CV needs at least {k} of each",
                labels.len() - n_pos
            )));
        }
        let keys: Vec<(usize, bool)> = strata
            .iter()
            .zip(&labels)
            .map(|(s, &l)| (s.map_or(6, Stratum::index), l))
            .collect();
        let folds = stratified_kfold_by(&keys, k, substream_seed(seed, "cv.folds", 0))?;
        if let FeatureSource::PerFold(sets) = features {
            if sets.len() != k {
                return Err(Error::SchemaMismatch(format!("{} fold feature sets for {k} folds", sets.len())));
            }
        }
        let fold_data = (0..k)
            .into_par_iter()
            .map(|f| {
                let train_rows: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
                let test_rows: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
                let features = match features {
                    FeatureSource::Fixed(codes) => codes.to_vec(),
                    FeatureSource::PerFold(sets) => sets[f].clone(),
                    FeatureSource::SelectInFold(config) => {
                        let train_matrix = matrix.select_rows(&train_rows);
                        select_features(&train_matrix, config, substream_seed(seed, "cv.select", f as u64))?
                            .stage2
                            .codes()
                    }
                };
                let sub = matrix.select_codes(&features)?;
                Ok(FoldData {
                    train: sub.select_rows(&train_rows).to_dataset(),
                    test: sub.select_rows(&test_rows).to_dataset(),
                    train_rows,
                    test_rows,
                    features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            strata: strata.to_vec(),
            folds,
            fold_data,
            seed,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.fold_data.len()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn strata(&self) -> &[Option<Stratum>] {
        &self.strata
    }

    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    pub fn fold_features(&self) -> Vec<Vec<String>> {
        self.fold_data.iter().map(|f| f.features.clone()).collect()
    }

    pub fn is_member(&self, regime: Regime, row: usize) -> bool {
        match regime {
            Regime::Global => true,
            Regime::Stratum(s) => self.strata[row] == Some(s),
        }
    }

    pub fn members(&self, regime: Regime) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.is_member(regime, i)).collect()
    }

    /// A regime can be modeled when it has at least two rows of each class.
    pub fn is_viable(&self, regime: Regime) -> bool {
        let rows = self.members(regime);
        let pos = rows.iter().filter(|&&i| self.labels[i]).count();
        pos >= 2 && rows.len() - pos >= 2
    }

    /// Trains on each fold's training members of `regime` and predicts its
    /// held-out members.
    pub fn cross_validate(&self, regime: Regime, params: &GbdtParams) -> Result<CvResult> {
        let per_fold: Vec<(Vec<(usize, f64)>, Option<f64>)> = self
            .fold_data
            .par_iter()
            .enumerate()
            .map(|(f, fold)| {
                let train_pos: Vec<usize> = (0..fold.train_rows.len())
                    .filter(|&j| self.is_member(regime, fold.train_rows[j]))
                    .collect();
                let test_pos: Vec<usize> = (0..fold.test_rows.len())
                    .filter(|&j| self.is_member(regime, fold.test_rows[j]))
                    .collect();
                if test_pos.is_empty() {
                    return Ok((Vec::new(), None));
                }
                let train_labels: Vec<bool> = train_pos.iter().map(|&j| self.labels[fold.train_rows[j]]).collect();
                let fold_params = GbdtParams {
                    seed: substream_seed(self.seed ^ params.seed, &format!("cv.model.{}", regime.key()), f as u64),
                    ..params.clone()
                };
                let model = train(&fold.train.select_rows(&train_pos), &train_labels, &fold_params)?;
                let probs = model.predict_proba(&fold.test.select_rows(&test_pos))?;
                let test_labels: Vec<bool> = test_pos.iter().map(|&j| self.labels[fold.test_rows[j]]).collect();
                let fold_auc = auc(&probs, &test_labels).ok();
                let preds = test_pos.iter().map(|&j| fold.test_rows[j]).zip(probs).collect();
                Ok((preds, fold_auc))
            })
            .collect::<Result<_>>()?;
        let mut oof = vec![None; self.n_rows()];
        let mut fold_aucs = Vec::with_capacity(per_fold.len());
        for (preds, a) in per_fold {
            for (row, p) in preds {
                oof[row] = Some(p);
            }
            fold_aucs.push(a);
        }
        Ok(CvResult { oof, fold_aucs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
    pub n: usize,
}

pub fn fold_summary(values: &[Option<f64>]) -> Option<MeanStd> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n: xs.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTuning {
    pub regime: Regime,
    pub best: GbdtParams,
    pub best_trial: Trial,
    pub trials: Vec<Trial>,
}

/// TPE over `tuning.space`, maximizing the mean per-fold AUC of the regime.
pub fn tune_regime(ctx: &CvContext, regime: Regime, base: &GbdtParams, tuning: &TuningConfig) -> Result<RegimeTuning> {
    let tpe = TpeConfig {
        seed: substream_seed(tuning.tpe.seed, &format!("tune.{}", regime.key()), 0),
        ..tuning.tpe
    };
    let objective = |point: &[f64]| {
        let params = tuning.space.apply(point, base)?;
        let cv = ctx.cross_validate(regime, &params)?;
        fold_summary(&cv.fold_aucs)
            .map(|m| m.mean)
            .ok_or(Error::SingleClass("every held-out fold"))
    };
    let (best_trial, trials) = optimize(objective, &tuning.space, &tpe)?;
    let best = tuning.space.apply(&best_trial.values, base)?;
    log::info!(
        "tuned {regime}: mean fold AUC {:.4} at trial {}",
        best_trial.objective,
        best_trial.index
    );
    Ok(RegimeTuning {
        regime,
        best,
        best_trial,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub stratum: Stratum,
    pub n: usize,
    pub targets: usize,
    /// Share of the evaluated strata; `None` when the stratum was skipped.
    pub share: Option<f64>,
    pub auc_global: Option<f64>,
    pub auc_group: Option<f64>,
    pub delta: Option<f64>,
    pub metrics_global: Option<Metrics>,
    pub metrics_group: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalRow {
    pub share: f64,
    pub auc_global: f64,
    pub auc_group: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub folds: usize,
    pub threshold: f64,
    pub rows: Vec<GroupRow>,
    /// Share-weighted totals over the evaluated strata.
    pub total: Option<TotalRow>,
    pub remainder_n: usize,
    /// Pooled out-of-fold metrics of the global model.
    pub overall_global: Metrics,
    /// Pooled out-of-fold metrics when each stratum uses its own model and
    /// everyone else the global one.
    pub overall_stratified: Metrics,
    pub fold_auc_global: Option<MeanStd>,
    pub fold_auc_stratified: Option<MeanStd>,
    pub roc_global: Vec<(f64, f64)>,
    pub roc_stratified: Vec<(f64, f64)>,
    pub params: BTreeMap<Regime, GbdtParams>,
}

/// Out-of-fold evaluation with fixed per-regime parameters. Strata missing
/// from `params` or without two rows per class are reported but skipped.
pub fn benchmark_report(
    ctx: &CvContext,
    params: &BTreeMap<Regime, GbdtParams>,
    eval: &EvaluationConfig,
) -> Result<GroupReport> {
    let global_params = params
        .get(&Regime::Global)
        .ok_or_else(|| Error::InvalidArgument("no parameters for the global regime".into()))?;
    let global = ctx.cross_validate(Regime::Global, global_params)?;
    let global_oof: Vec<f64> = global
        .oof
        .iter()
        .map(|p| p.expect("global regime covers every row"))
        .collect();

    let mut stratified_oof = global_oof.clone();
    let mut group_results: BTreeMap<Stratum, CvResult> = BTreeMap::new();
    for s in Stratum::ALL {
        let regime = Regime::Stratum(s);
        match params.get(&regime) {
            Some(p) if ctx.is_viable(regime) => {
                let cv = ctx.cross_validate(regime, p)?;
                for (row, pred) in cv.oof.iter().enumerate() {
                    if let Some(pred) = pred {
                        stratified_oof[row] = *pred;
                    }
                }
                group_results.insert(s, cv);
            }
            _ => {
                if !ctx.members(regime).is_empty() {
                    log::warn!("stratum {s} skipped: needs two rows of each class and tuned parameters");
                }
            }
        }
    }

    let labels = ctx.labels();
    let mut rows = Vec::with_capacity(6);
    for s in Stratum::ALL {
        let members = ctx.members(Regime::Stratum(s));
        let sub_labels: Vec<bool> = members.iter().map(|&i| labels[i]).collect();
        let targets = sub_labels.iter().filter(|&&l| l).count();
        let mut row = GroupRow {
            group: s.to_string(),
            stratum: s,
            n: members.len(),
            targets,
            share: None,
            auc_global: None,
            auc_group: None,
            delta: None,
            metrics_global: None,
            metrics_group: None,
        };
        if let Some(cv) = group_results.get(&s) {
            let g: Vec<f64> = members.iter().map(|&i| global_oof[i]).collect();
            let own: Vec<f64> = members.iter().map(|&i| cv.oof[i].expect("member has a prediction")).collect();
            let mg = threshold_metrics(&g, &sub_labels, eval.threshold)?;
            let mo = threshold_metrics(&own, &sub_labels, eval.threshold)?;
            row.auc_global = Some(mg.auc);
            row.auc_group = Some(mo.auc);
            row.delta = Some(mo.auc - mg.auc);
            row.metrics_global = Some(mg);
            row.metrics_group = Some(mo);
        }
        rows.push(row);
    }
    let evaluated: usize = rows.iter().filter(|r| r.auc_group.is_some()).map(|r| r.n).sum();
    for r in rows.iter_mut().filter(|r| r.auc_group.is_some()) {
        r.share = Some(r.n as f64 / evaluated as f64);
    }
    let total = if evaluated > 0 {
        let done: Vec<&GroupRow> = rows.iter().filter(|r| r.share.is_some()).collect();
        let shares: Vec<f64> = done.iter().map(|r| r.share.unwrap_or(0.0)).collect();
        let ag: Vec<f64> = done.iter().map(|r| r.auc_global.unwrap_or(0.0)).collect();
        let ao: Vec<f64> = done.iter().map(|r| r.auc_group.unwrap_or(0.0)).collect();
        let auc_global = weighted_total(&ag, &shares)?;
        let auc_group = weighted_total(&ao, &shares)?;
        Some(TotalRow {
            share: shares.iter().sum(),
            auc_global,
            auc_group,
            delta: auc_group - auc_global,
        })
    } else {
        None
    };

    let stratified_fold_aucs: Vec<Option<f64>> = (0..ctx.k())
        .map(|f| {
            let rows: Vec<usize> = (0..ctx.n_rows()).filter(|&i| ctx.folds()[i] == f).collect();
            let s: Vec<f64> = rows.iter().map(|&i| stratified_oof[i]).collect();
            let l: Vec<bool> = rows.iter().map(|&i| labels[i]).collect();
            auc(&s, &l).ok()
        })
        .collect();

    Ok(GroupReport {
        folds: ctx.k(),
        threshold: eval.threshold,
        rows,
        total,
        remainder_n: ctx.strata().iter().filter(|s| s.is_none()).count(),
        overall_global: threshold_metrics(&global_oof, labels, eval.threshold)?,
        overall_stratified: threshold_metrics(&stratified_oof, labels, eval.threshold)?,
        fold_auc_global: fold_summary(&global.fold_aucs),
        fold_auc_stratified: fold_summary(&stratified_fold_aucs),
        roc_global: thin_curve(&roc_points(&global_oof, labels)?, eval.roc_points),
        roc_stratified: thin_curve(&roc_points(&stratified_oof, labels)?, eval.roc_points),
        params: params.clone(),
    })
}

pub struct BenchmarkInputs<'a> {
    pub matrix: &'a RecencyFeatureMatrix,
    pub strata: &'a [Option<Stratum>],
    pub features: FeatureSource<'a>,
    pub evaluation: &'a EvaluationConfig,
    pub tuning: &'a TuningConfig,
    pub base_params: &'a GbdtParams,
    pub seed: u64,
}

/// Tunes every viable regime, then evaluates all of them out of fold.
pub fn run_benchmark(inputs: &BenchmarkInputs<'_>) -> Result<(GroupReport, Vec<RegimeTuning>)> {
    inputs.evaluation.validate()?;
    inputs.tuning.validate()?;
    let ctx = CvContext::build(
        inputs.matrix,
        inputs.strata,
        inputs.evaluation.folds,
        inputs.features,
        inputs.seed,
    )?;
    let mut tunings = Vec::new();
    for regime in Regime::all() {
        if ctx.is_viable(regime) {
            tunings.push(tune_regime(&ctx, regime, inputs.base_params, inputs.tuning)?);
        }
    }
    let params: BTreeMap<Regime, GbdtParams> = tunings.iter().map(|t| (t.regime, t.best.clone())).collect();
    let report = benchmark_report(&ctx, &params, inputs.evaluation)?;
    Ok((report, tunings))
}
