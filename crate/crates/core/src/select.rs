//! Two-stage feature selection (prevalence screen with per-domain quotas,
//! then model gain), attribution coverage, and heterogeneity statistics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::boosting::{interventional_shap, train, Dataset, GbdtModel, GbdtParams};
use crate::ehr::Domain;
use crate::error::{Error, Result};
use crate::evaluate::Stratum;
use crate::featurize::{RecencyFeatureMatrix, SENTINEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceScore {
    pub concept_code: String,
    pub domain: Domain,
    pub p_target: f64,
    pub p_control: f64,
    pub score: f64,
    pub n_target_present: u64,
    pub n_control_present: u64,
}

/// Presence is any non-sentinel value. Columns come back in matrix order.
pub fn prevalence_scores(matrix: &RecencyFeatureMatrix) -> Result<Vec<PrevalenceScore>> {
    let labels = matrix.labels();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::SingleClass("targets"));
    }
    if n_neg == 0 {
        return Err(Error::SingleClass("controls"));
    }
    Ok((0..matrix.n_cols())
        .into_par_iter()
        .map(|j| {
            let (mut pos, mut neg) = (0usize, 0usize);
            for &(row, v) in matrix.column_cells(j) {
                if v != SENTINEL {
                    if labels[row as usize] {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
            let p_target = pos as f64 / n_pos as f64;
            let p_control = neg as f64 / n_neg as f64;
            let col = &matrix.columns()[j];
            PrevalenceScore {
                concept_code: col.concept_code.clone(),
                domain: col.domain,
                p_target,
                p_control,
                score: (p_target - p_control).abs(),
                n_target_present: pos as u64,
                n_control_present: neg as u64,
            }
        })
        .collect())
}

/// Orders by score without rounding error: with shared class sizes the
/// score is |pos·n_neg − neg·n_pos| over a common denominator.
fn prevalence_order(a: &PrevalenceScore, b: &PrevalenceScore, n_pos: u64, n_neg: u64) -> Ordering {
    let numerator = |s: &PrevalenceScore| {
        (s.n_target_present as u128 * n_neg as u128).abs_diff(s.n_control_present as u128 * n_pos as u128)
    };
    numerator(b)
        .cmp(&numerator(a))
        .then(b.n_target_present.cmp(&a.n_target_present))
        .then_with(|| a.concept_code.cmp(&b.concept_code))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotaConfig {
    pub conditions: usize,
    pub procedures: usize,
    pub medications: usize,
}

impl Default for QuotaConfig {
    fn default() -> Self {
        Self {
            conditions: 300,
            procedures: 500,
            medications: 300,
        }
    }
}

impl QuotaConfig {
    pub fn quota(&self, domain: Domain) -> usize {
        match domain {
            Domain::Condition => self.conditions,
            Domain::Procedure => self.procedures,
            Domain::Medication => self.medications,
        }
    }

    pub fn total(&self) -> usize {
        self.conditions + self.procedures + self.medications
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeature {
    pub concept_code: String,
    pub domain: Domain,
    pub stage: Stage,
    pub score: f64,
}

/// Concepts in rank order, all tagged with the stage that produced them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectedFeatureSet {
    pub features: Vec<SelectedFeature>,
}

impl SelectedFeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn codes(&self) -> Vec<String> {
        self.features.iter().map(|f| f.concept_code.clone()).collect()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.features.iter().any(|f| f.concept_code == code)
    }
}

/// Keeps the top `quota` concepts of each domain by absolute prevalence
/// difference. Ties go to the higher target prevalence, then the smaller code.
pub fn stage1_prevalence(matrix: &RecencyFeatureMatrix, quotas: &QuotaConfig) -> Result<SelectedFeatureSet> {
    let mut scores = prevalence_scores(matrix)?;
    let n_pos = matrix.labels().iter().filter(|&&l| l).count() as u64;
    let n_neg = matrix.n_rows() as u64 - n_pos;
    scores.sort_by(|a, b| prevalence_order(a, b, n_pos, n_neg));
    let mut taken: BTreeMap<Domain, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for s in scores {
        let n = taken.entry(s.domain).or_insert(0);
        if *n < quotas.quota(s.domain) {
            *n += 1;
            kept.push(SelectedFeature {
                concept_code: s.concept_code,
                domain: s.domain,
                stage: Stage::Stage1,
                score: s.score,
            });
        }
    }
    for d in Domain::ALL {
        let n = taken.get(&d).copied().unwrap_or(0);
        if n < quotas.quota(d) {
            log::warn!(
                "stage 1: only {n} {} concepts available for a quota of {}; keeping all",
                d.as_str(),
                quotas.quota(d)
            );
        }
    }
    Ok(SelectedFeatureSet { features: kept })
}

/// Trains one model on `matrix` (already restricted to the stage-1 set) and
/// keeps the `k` features with the largest total split gain. Features the
/// model never splits on are not retained.
pub fn stage2_gain(
    matrix: &RecencyFeatureMatrix,
    params: &GbdtParams,
    k: usize,
) -> Result<(SelectedFeatureSet, GbdtModel)> {
    if matrix.n_cols() == 0 {
        return Err(Error::InvalidArgument("stage 2 needs a non-empty stage-1 set".into()));
    }
    let model = train(&matrix.to_dataset(), matrix.labels(), params)?;
    let gains = model.gain_importance();
    let mut order: Vec<usize> = (0..gains.len()).filter(|&j| gains[j] > 0.0).collect();
    order.sort_by(|&a, &b| {
        gains[b]
            .total_cmp(&gains[a])
            .then_with(|| matrix.columns()[a].concept_code.cmp(&matrix.columns()[b].concept_code))
    });
    if order.len() < k {
        log::warn!(
            "stage 2: {} of {} features carry gain, fewer than k = {k}; keeping all of them",
            order.len(),
            gains.len()
        );
    }
    order.truncate(k);
    let features = order
        .into_iter()
        .map(|j| SelectedFeature {
            concept_code: matrix.columns()[j].concept_code.clone(),
            domain: matrix.columns()[j].domain,
            stage: Stage::Stage2,
            score: gains[j],
        })
        .collect();
    Ok((SelectedFeatureSet { features }, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttributionMode {
    /// Exact per-path (Saabas) contributions.
    #[default]
    Path,
    /// Interventional TreeSHAP against the first `background` rows.
    Interventional { background: usize },
}

/// Mean absolute attribution per feature, in model column order.
pub fn attribution_importance(model: &GbdtModel, data: &Dataset, mode: AttributionMode) -> Result<Vec<f64>> {
    match mode {
        AttributionMode::Path => model.mean_abs_contributions(data),
        AttributionMode::Interventional { background } => {
            let bg_rows: Vec<usize> = (0..background.min(data.n_rows())).collect();
            if bg_rows.is_empty() {
                return Err(Error::InvalidArgument("interventional attribution needs background rows".into()));
            }
            let bg = data.select_rows(&bg_rows);
            let rows = data.row_major();
            let per_row: Vec<Vec<f64>> = (0..data.n_rows())
                .into_par_iter()
                .map(|i| interventional_shap(model, &rows.row(i), &bg).map(|a| a.contributions))
                .collect::<Result<_>>()?;
            let mut out = vec![0.0; model.n_features()];
            for r in &per_row {
                for (o, x) in out.iter_mut().zip(r) {
                    *o += x.abs();
                }
            }
            let n = data.n_rows().max(1) as f64;
            out.iter_mut().for_each(|x| *x /= n);
            Ok(out)
        }
    }
}

/// Share of total attribution mass carried by the `selected` codes.
pub fn shap_coverage(
    model: &GbdtModel,
    data: &Dataset,
    selected: &SelectedFeatureSet,
    mode: AttributionMode,
) -> Result<f64> {
    let importance = attribution_importance(model, data, mode)?;
    let chosen: HashSet<&str> = selected.features.iter().map(|f| f.concept_code.as_str()).collect();
    let total: f64 = importance.iter().sum();
    if total == 0.0 {
        log::warn!("attribution is identically zero; coverage reported as 1.0");
        return Ok(1.0);
    }
    let covered: f64 = model
        .feature_names
        .iter()
        .zip(&importance)
        .filter(|(name, _)| chosen.contains(name.as_str()))
        .map(|(_, v)| v)
        .sum();
    Ok((covered / total).clamp(0.0, 1.0))
}

/// Survival function of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

/// Midranks (1-based) of `values`, plus the tie term Σ(t³ − t).
pub(crate) fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Kruskal-Wallis H with tie correction and its chi-square p-value on
/// `groups − 1` degrees of freedom.
pub fn kruskal_wallis<S: AsRef<[f64]>>(samples: &[S]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("Kruskal-Wallis needs at least two groups".into()));
    }
    if samples.iter().any(|s| s.as_ref().is_empty()) {
        return Err(Error::InvalidArgument("Kruskal-Wallis groups must be non-empty".into()));
    }
    let pooled: Vec<f64> = samples.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
    if pooled.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("Kruskal-Wallis values must not be NaN".into()));
    }
    let n = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for s in samples {
        let len = s.as_ref().len();
        let r: f64 = ranks[offset..offset + len].iter().sum();
        sum += r * r / len as f64;
        offset += len;
    }
    let h = (12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    Ok((h, chi_square_sf(h, (samples.len() - 1) as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityTest {
    pub concept_code: String,
    pub h: f64,
    pub p: f64,
}

/// Kruskal-Wallis across strata for every column, counting p < `alpha`.
/// Rows with no stratum are ignored, as are strata with fewer than two rows.
pub fn count_significant(
    matrix: &RecencyFeatureMatrix,
    strata: &[Option<Stratum>],
    alpha: f64,
) -> Result<(usize, Vec<HeterogeneityTest>)> {
    if strata.len() != matrix.n_rows() {
        return Err(Error::SchemaMismatch(format!(
            "{} strata for {} matrix rows",
            strata.len(),
            matrix.n_rows()
        )));
    }
    let mut members: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        if let Some(s) = s {
            members.entry(*s).or_default().push(i);
        }
    }
    members.retain(|s, rows| {
        if rows.len() < 2 {
            log::warn!("stratum {s} has {} member(s); excluded from heterogeneity tests", rows.len());
            false
        } else {
            true
        }
    });
    let tests: Vec<HeterogeneityTest> = (0..matrix.n_cols())
        .into_par_iter()
        .map(|j| {
            let dense = matrix.dense_column(j);
            let groups: Vec<Vec<f64>> = members
                .values()
                .map(|rows| rows.iter().map(|&r| dense[r] as f64).collect())
                .collect();
            let (h, p) = if groups.len() < 2 {
                (0.0, 1.0)
            } else {
                kruskal_wallis(&groups)?
            };
            Ok(HeterogeneityTest {
                concept_code: matrix.columns()[j].concept_code.clone(),
                h,
                p,
            })
        })
        .collect::<Result<_>>()?;
    let count = tests.iter().filter(|t| t.p < alpha).count();
    Ok((count, tests))
}

/// Two-proportion chi-square test without continuity correction. Returns
/// `(k1/n1 − k2/n2, p)`.
pub fn compare_prevalence(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<(f64, f64)> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidArgument("both groups need at least one member".into()));
    }
    if k1 > n1 || k2 > n2 {
        return Err(Error::InvalidArgument("counts exceed group sizes".into()));
    }
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    let diff = p1 - p2;
    if var == 0.0 {
        return Ok((diff, 1.0));
    }
    let z2 = diff * diff / var;
    Ok((diff, chi_square_sf(z2, 1.0)))
}

pub const SELECTED_HEADER: [&str; 5] = ["rank", "concept_code", "domain", "stage", "score"];

/// Writes each set with ranks starting at 1.
pub fn write_selected(path: &Path, sets: &[&SelectedFeatureSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SELECTED_HEADER)?;
    for set in sets {
        for (rank, f) in set.features.iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                f.concept_code.clone(),
                f.domain.as_str().to_string(),
                f.stage.as_str().to_string(),
                f.score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads back the sets of one stage, in rank order.
pub fn read_selected(path: &Path, stage: Stage) -> Result<SelectedFeatureSet> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<(usize, SelectedFeature)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: &str| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: m.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let row_stage = match &rec[3] {
            "stage1" => Stage::Stage1,
            "stage2" => Stage::Stage2,
            _ => return Err(bad("bad stage")),
        };
        if row_stage != stage {
            continue;
        }
        rows.push((
            rec[0].parse().map_err(|_| bad("bad rank"))?,
            SelectedFeature {
                concept_code: rec[1].to_string(),
                domain: Domain::parse(&rec[2]).ok_or_else(|| bad("bad domain"))?,
                stage,
                score: rec[4].parse().map_err(|_| bad("bad score"))?,
            },
        ));
    }
    rows.sort_by_key(|r| r.0);
    Ok(SelectedFeatureSet {
        features: rows.into_iter().map(|r| r.1).collect(),
    })
}

pub fn write_heterogeneity(path: &Path, tests: &[HeterogeneityTest]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["concept_code", "H", "p"])?;
    for t in tests {
        w.write_record([t.concept_code.clone(), t.h.to_string(), t.p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub quotas: QuotaConfig,
    pub k: usize,
    /// Select once on the full cohort instead of inside each training fold.
    pub paper_mode: bool,
    pub alpha: f64,
    pub attribution: AttributionMode,
    /// Parameters of the stage-2 ranking model.
    pub stage2_params: GbdtParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            quotas: QuotaConfig::default(),
            k: 100,
            paper_mode: false,
            alpha: 0.05,
            attribution: AttributionMode::Path,
            stage2_params: GbdtParams::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("selection.k", "must be >= 1"));
        }
        if self.quotas.total() == 0 {
            return Err(Error::config("selection.quotas", "at least one quota must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("selection.alpha", "must lie in (0, 1)"));
        }
        if let AttributionMode::Interventional { background: 0 } = self.attribution {
            return Err(Error::config("selection.attribution.background", "must be >= 1"));
        }
        self.stage2_params
            .validate()
            .map_err(|e| Error::config("selection.stage2_params", e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub stage1: SelectedFeatureSet,
    pub stage2: SelectedFeatureSet,
    /// The stage-2 ranking model, trained on the stage-1 columns.
    pub model: GbdtModel,
}

/// Both stages on `matrix`; `seed` drives the ranking model's sampling.
pub fn select_features(matrix: &RecencyFeatureMatrix, config: &SelectionConfig, seed: u64) -> Result<Selection> {
    let stage1 = stage1_prevalence(matrix, &config.quotas)?;
    let restricted = matrix.select_codes(&stage1.codes())?;
    let params = GbdtParams {
        seed,
        ..config.stage2_params.clone()
    };
    let (stage2, model) = stage2_gain(&restricted, &params, config.k)?;
    Ok(Selection { stage1, stage2, model })
}

#[cfg(test)]
mod tests;
