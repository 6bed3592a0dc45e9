//! Metrics, stratified cross-validation, the sex-by-age benchmark and report
//! aggregation.

mod benchmark;
mod report;

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cohort::{CohortLabel, Label};
use crate::ehr::{age_in_years, EventStore, Participant, Sex};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::select::midranks;

pub use benchmark::{
    benchmark_report, fold_summary, run_benchmark, tune_regime, BenchmarkInputs, CvContext, CvResult,
    EvaluationConfig, FeatureSource, FoldData, GroupReport, GroupRow, MeanStd, Regime, RegimeTuning, TotalRow,
    TuningConfig,
};
pub use report::{render_markdown, Report, ReportSeeds, SelectionSummary, TuningSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgeBin {
    Young,
    Middle,
    Older,
}

impl AgeBin {
    pub const ALL: [AgeBin; 3] = [AgeBin::Young, AgeBin::Middle, AgeBin::Older];

    pub fn from_age(age: i32) -> Self {
        if age < 40 {
            AgeBin::Young
        } else if age < 60 {
            AgeBin::Middle
        } else {
            AgeBin::Older
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBin::Young => "18-40",
            AgeBin::Middle => "40-60",
            AgeBin::Older => "60+",
        }
    }

    /// Inclusive whole-year age range used when sampling synthetic people.
    pub fn sampling_range(self) -> (i32, i32) {
        match self {
            AgeBin::Young => (18, 39),
            AgeBin::Middle => (40, 59),
            AgeBin::Older => (60, 84),
        }
    }
}

/// One of the six sex-by-age strata. Only male and female participants are
/// stratified; everyone else falls in the remainder bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stratum {
    pub sex: Sex,
    pub age_bin: AgeBin,
}

impl Stratum {
    pub const ALL: [Stratum; 6] = [
        Stratum { sex: Sex::Male, age_bin: AgeBin::Young },
        Stratum { sex: Sex::Male, age_bin: AgeBin::Middle },
        Stratum { sex: Sex::Male, age_bin: AgeBin::Older },
        Stratum { sex: Sex::Female, age_bin: AgeBin::Young },
        Stratum { sex: Sex::Female, age_bin: AgeBin::Middle },
        Stratum { sex: Sex::Female, age_bin: AgeBin::Older },
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("strata are male or female")
    }

    pub fn key(self) -> String {
        format!("{}_{}", self.sex.as_str(), self.age_bin.label())
    }

    pub fn parse(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.key() == key)
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sex = match self.sex {
            Sex::Male => "Male",
            Sex::Female => "Female",
            Sex::OtherUnknown => "Other",
        };
        write!(f, "{sex} {}", self.age_bin.label())
    }
}

impl Serialize for Stratum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Stratum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let key = String::deserialize(d)?;
        Stratum::parse(&key).ok_or_else(|| serde::de::Error::custom(format!("unknown stratum {key:?}")))
    }
}

/// `None` for participants outside the six strata (sex other/unknown).
pub fn assign_stratum(participant: &Participant, index_date: NaiveDate) -> Option<Stratum> {
    match participant.sex_at_birth {
        Sex::OtherUnknown => None,
        sex => Some(Stratum {
            sex,
            age_bin: AgeBin::from_age(age_in_years(participant.birth_date, index_date)),
        }),
    }
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::SingleClass("positives"));
    }
    if n_neg == 0 {
        return Err(Error::SingleClass("negatives"));
    }
    Ok((n_pos, n_neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let (ranks, _) = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((r_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Metrics {
    pub fn from_counts(auc: f64, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            auc,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Confusion counts with "positive iff score >= threshold", plus AUC.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    let auc = auc(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(auc, tp, fp, tn, fn_))
}

/// `(fpr, tpr)` at every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(out)
}

/// Keeps at most `max_points` of a curve, always including both ends.
pub fn thin_curve(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    if points.len() <= max_points || max_points < 2 {
        return points.to_vec();
    }
    let last = points.len() - 1;
    (0..max_points).map(|i| points[i * last / (max_points - 1)]).collect()
}

/// Fold index per row. Rows are grouped by key; each group is shuffled and
/// dealt round-robin, continuing where the previous group stopped, so every
/// group and the fold sizes are balanced to within one.
pub fn stratified_kfold_by<K: Ord + Clone>(keys: &[K], k: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        groups.entry(key.clone()).or_default().push(i);
    }
    let mut folds = vec![0usize; keys.len()];
    let mut next = 0;
    for (g, members) in groups.values_mut().enumerate() {
        members.shuffle(&mut substream(seed, "kfold", g as u64));
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// Stratified on the binary label; each class needs at least `k` members.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let smallest = n_pos.min(labels.len() - n_pos);
    if smallest < k {
        return Err(Error::InvalidArgument(format!(
            "smallest class has {smallest} members, fewer than {k} folds"
        )));
    }
    stratified_kfold_by(labels, k, seed)
}

/// Σ share · auc, with shares required to sum to one.
pub fn weighted_total(aucs: &[f64], shares: &[f64]) -> Result<f64> {
    if aucs.len() != shares.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} AUCs for {} shares",
            aucs.len(),
            shares.len()
        )));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("shares sum to {total}, not 1")));
    }
    Ok(aucs.iter().zip(shares).map(|(a, s)| a * s).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub group: String,
    pub n: usize,
    pub targets: usize,
}

impl StratumCount {
    pub fn target_percent(&self) -> Option<f64> {
        (self.n > 0).then(|| 100.0 * self.targets as f64 / self.n as f64)
    }

    /// `"174 (59.8%)"`, or a dash for an empty group.
    pub fn formatted(&self) -> String {
        match self.target_percent() {
            Some(p) => format!("{} ({p:.1}%)", thousands(self.targets)),
            None => "\u{2014}".to_string(),
        }
    }
}

pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStatistics {
    /// The six strata in table order.
    pub strata: Vec<StratumCount>,
    pub remainder: StratumCount,
    pub total: StratumCount,
}

pub fn cohort_statistics(cohort: &[CohortLabel], store: &EventStore) -> Result<CohortStatistics> {
    let mut counts = [(0usize, 0usize); 7];
    for c in cohort {
        let p = store.participant(c.person_id)?;
        let slot = assign_stratum(p, c.index_date).map_or(6, Stratum::index);
        counts[slot].0 += 1;
        if c.label == Label::Target {
            counts[slot].1 += 1;
        }
    }
    Ok(statistics_from_counts(&counts))
}

/// Builds the table from `(n, targets)` per stratum, remainder last.
pub fn statistics_from_counts(counts: &[(usize, usize); 7]) -> CohortStatistics {
    let strata = Stratum::ALL
        .iter()
        .zip(counts)
        .map(|(s, &(n, targets))| StratumCount {
            group: s.to_string(),
            n,
            targets,
        })
        .collect();
    let remainder = StratumCount {
        group: "Other/unknown sex".into(),
        n: counts[6].0,
        targets: counts[6].1,
    };
    let total = StratumCount {
        group: "Total".into(),
        n: counts.iter().map(|c| c.0).sum(),
        targets: counts.iter().map(|c| c.1).sum(),
    };
    CohortStatistics {
        strata,
        remainder,
        total,
    }
}

#[cfg(test)]
mod tests;
