//! Cohort construction: rule-based phenotyping, visit-frequency categories,
//! logistic propensity scores and greedy 1:1 nearest-neighbor matching.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boosting::sigmoid;
use crate::ehr::{age_in_years, parse_date, EventStore, Participant, PersonId, DATE_FORMAT};
use crate::error::{Error, Result};
use crate::evaluate::AgeBin;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhenotypeConfig {
    pub crs_code_set: BTreeSet<String>,
    pub min_code_count: usize,
    pub qualifying_span_days: u32,
}

impl Default for PhenotypeConfig {
    fn default() -> Self {
        Self {
            crs_code_set: BTreeSet::new(),
            min_code_count: 2,
            qualifying_span_days: 730,
        }
    }
}

impl PhenotypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crs_code_set.is_empty() {
            return Err(Error::config("phenotype.crs_code_set", "must not be empty"));
        }
        if self.min_code_count < 1 {
            return Err(Error::config("phenotype.min_code_count", "must be >= 1"));
        }
        if self.qualifying_span_days == 0 {
            return Err(Error::config("phenotype.qualifying_span_days", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Target,
    Control,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortLabel {
    pub person_id: PersonId,
    pub label: Label,
    pub index_date: NaiveDate,
    pub matched_to: Option<PersonId>,
}

/// First date of the earliest run of `min_code_count` distinct CRS-code
/// dates spanning at most `qualifying_span_days`.
pub fn qualifying_index_date(crs_dates: &[NaiveDate], config: &PhenotypeConfig) -> Option<NaiveDate> {
    let mut dates = crs_dates.to_vec();
    dates.sort_unstable();
    dates.dedup();
    let m = config.min_code_count;
    if dates.len() < m {
        return None;
    }
    (0..=dates.len() - m)
        .find(|&i| (dates[i + m - 1] - dates[i]).num_days() <= config.qualifying_span_days as i64)
        .map(|i| dates[i])
}

/// Targets only, in participant order. Everyone else is implicitly a control.
pub fn phenotype(store: &EventStore, config: &PhenotypeConfig) -> Result<Vec<CohortLabel>> {
    config.validate()?;
    let crs: HashSet<u32> = config
        .crs_code_set
        .iter()
        .filter_map(|c| store.concept_id(c))
        .collect();
    let mut out = Vec::new();
    for p in store.participants() {
        let dates: Vec<NaiveDate> = store
            .events(p.person_id)?
            .iter()
            .filter(|e| crs.contains(&e.concept))
            .map(|e| e.date)
            .collect();
        if let Some(index_date) = qualifying_index_date(&dates, config) {
            out.push(CohortLabel {
                person_id: p.person_id,
                label: Label::Target,
                index_date,
                matched_to: None,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitFrequencyCategory {
    Low,
    Mid,
    High,
}

impl VisitFrequencyCategory {
    pub fn from_count(count: usize) -> Self {
        match count {
            0..=11 => Self::Low,
            12..=24 => Self::Mid,
            _ => Self::High,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }
}

/// Visits are distinct event dates in the window ending at `end_date`.
pub fn visit_count(store: &EventStore, person: PersonId, end_date: NaiveDate, window_days: u32) -> Result<usize> {
    let events = store.events_in_window(person, end_date, window_days)?;
    let mut n = 0;
    let mut last = None;
    for e in events {
        if last != Some(e.date) {
            n += 1;
            last = Some(e.date);
        }
    }
    Ok(n)
}

pub fn visit_frequency_category(
    store: &EventStore,
    person: PersonId,
    end_date: NaiveDate,
    window_days: u32,
) -> Result<VisitFrequencyCategory> {
    Ok(VisitFrequencyCategory::from_count(visit_count(store, person, end_date, window_days)?))
}

/// Age bins shared by matching and stratification.
pub fn age_category(age: i32) -> &'static str {
    AgeBin::from_age(age).label()
}

pub const MATCHING_COVARIATES: [&str; 5] = ["age_category", "sex_at_birth", "race", "ethnicity", "visit_frequency"];

/// One level per matching covariate, in [`MATCHING_COVARIATES`] order.
pub type CovariateRecord = Vec<String>;

pub fn covariates(store: &EventStore, p: &Participant, at: NaiveDate, window_days: u32) -> Result<CovariateRecord> {
    Ok(vec![
        age_category(age_in_years(p.birth_date, at)).to_string(),
        p.sex_at_birth.as_str().to_string(),
        p.race.clone(),
        p.ethnicity.clone(),
        visit_frequency_category(store, p.person_id, at, window_days)?
            .as_str()
            .to_string(),
    ])
}

/// Logistic model over one-hot covariates. The first (sorted) level of each
/// covariate is the reference and keeps a zero coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    /// `(covariate, levels)` in column order.
    pub schema: Vec<(String, Vec<String>)>,
    /// Per covariate, one coefficient per level.
    pub coefficients: Vec<Vec<f64>>,
    pub iterations: usize,
}

pub const RIDGE: f64 = 1e-6;
const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;

struct Design {
    schema: Vec<(String, Vec<String>)>,
    level_index: Vec<HashMap<String, usize>>,
    width: usize,
}

impl Design {
    fn new(names: &[&str], rows: &[CovariateRecord]) -> Result<Self> {
        let mut schema = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let levels: BTreeSet<&str> = rows
                .iter()
                .map(|r| {
                    r.get(k)
                        .map(String::as_str)
                        .ok_or_else(|| Error::SchemaMismatch(format!("record lacks covariate {name}")))
                })
                .collect::<Result<_>>()?;
            schema.push((name.to_string(), levels.into_iter().map(String::from).collect::<Vec<_>>()));
        }
        Ok(Self::from_schema(schema))
    }

    fn from_schema(schema: Vec<(String, Vec<String>)>) -> Self {
        let level_index = schema
            .iter()
            .map(|(_, levels)| levels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect())
            .collect();
        // intercept + (levels - 1) per covariate
        let width = 1 + schema.iter().map(|(_, l)| l.len().saturating_sub(1)).sum::<usize>();
        Self {
            schema,
            level_index,
            width,
        }
    }

    /// Column indices (besides the intercept) set to one for a record.
    fn active(&self, row: &CovariateRecord) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.schema.len());
        let mut offset = 1;
        for (k, (name, levels)) in self.schema.iter().enumerate() {
            let v = row
                .get(k)
                .ok_or_else(|| Error::SchemaMismatch(format!("record lacks covariate {name}")))?;
            let level = *self.level_index[k]
                .get(v)
                .ok_or_else(|| Error::SchemaMismatch(format!("level {v:?} of {name} not in schema")))?;
            if level > 0 {
                out.push(offset + level - 1);
            }
            offset += levels.len().saturating_sub(1);
        }
        Ok(out)
    }
}

fn penalized_loglik(beta: &DVector<f64>, rows: &[Vec<usize>], y: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &yi) in rows.iter().zip(y) {
        let eta = beta[0] + r.iter().map(|&j| beta[j]).sum::<f64>();
        // y*eta - log(1 + e^eta)
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        ll += yi * eta - softplus;
    }
    ll - 0.5 * RIDGE * beta.norm_squared()
}

/// Ridge-stabilized logistic regression by damped Newton iterations.
pub fn fit_propensity(names: &[&str], rows: &[CovariateRecord], labels: &[bool]) -> Result<PropensityModel> {
    if rows.len() != labels.len() {
        return Err(Error::SchemaMismatch("rows and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::SingleClass("controls"));
    }
    if n_pos == labels.len() {
        return Err(Error::SingleClass("targets"));
    }
    let design = Design::new(names, rows)?;
    let active: Vec<Vec<usize>> = rows.iter().map(|r| design.active(r)).collect::<Result<_>>()?;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let p = design.width;
    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = penalized_loglik(&beta, &active, &y);
    let mut grad_norm = f64::INFINITY;

    for iter in 1..=MAX_ITER {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (r, &yi) in active.iter().zip(&y) {
            let eta = beta[0] + r.iter().map(|&j| beta[j]).sum::<f64>();
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            let resid = yi - mu;
            grad[0] += resid;
            hess[(0, 0)] += w;
            for &a in r {
                grad[a] += resid;
                hess[(0, a)] += w;
                hess[(a, 0)] += w;
                for &b in r {
                    hess[(a, b)] += w;
                }
            }
        }
        grad -= &beta * RIDGE;
        for j in 0..p {
            hess[(j, j)] += RIDGE;
        }
        grad_norm = grad.norm();
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("propensity Hessian is not positive definite".into()))?
            .solve(&grad);

        // halve until the penalized likelihood does not decrease
        let mut scale = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = penalized_loglik(&next, &active, &y);
        while next_ll < ll && scale > 1e-10 {
            scale *= 0.5;
            next = &beta + &step * scale;
            next_ll = penalized_loglik(&next, &active, &y);
        }
        let change = (&next - &beta).amax();
        beta = next;
        ll = next_ll;
        if change < TOL {
            return Ok(PropensityModel::from_beta(&design, &beta, iter));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        gradient_norm: grad_norm,
    })
}

impl PropensityModel {
    fn from_beta(design: &Design, beta: &DVector<f64>, iterations: usize) -> Self {
        let mut coefficients = Vec::with_capacity(design.schema.len());
        let mut offset = 1;
        for (_, levels) in &design.schema {
            let mut c = vec![0.0; levels.len()];
            for (l, slot) in c.iter_mut().enumerate().skip(1) {
                *slot = beta[offset + l - 1];
            }
            offset += levels.len().saturating_sub(1);
            coefficients.push(c);
        }
        Self {
            intercept: beta[0],
            schema: design.schema.clone(),
            coefficients,
            iterations,
        }
    }

    pub fn margin(&self, row: &CovariateRecord) -> Result<f64> {
        let mut eta = self.intercept;
        for (k, (name, levels)) in self.schema.iter().enumerate() {
            let v = row
                .get(k)
                .ok_or_else(|| Error::SchemaMismatch(format!("record lacks covariate {name}")))?;
            let l = levels
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| Error::SchemaMismatch(format!("level {v:?} of {name} not in schema")))?;
            eta += self.coefficients[k][l];
        }
        Ok(eta)
    }

    pub fn score(&self, row: &CovariateRecord) -> Result<f64> {
        Ok(sigmoid(self.margin(row)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(target, control)` in matching order.
    pub pairs: Vec<(PersonId, PersonId)>,
    pub unmatched_targets: Vec<PersonId>,
}

/// Greedy 1:1 matching without replacement. Targets go in descending score
/// order (ties by id); each takes the unused control with the smallest
/// absolute score difference, ties to the smaller control id.
pub fn match_by_score(targets: &[(PersonId, f64)], controls: &[(PersonId, f64)]) -> MatchResult {
    let mut order: Vec<(PersonId, f64)> = targets.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    // scores lie in (0, 1), so the IEEE bit pattern orders like the value
    let mut pool: BTreeSet<(u64, PersonId)> = controls.iter().map(|&(id, s)| (s.to_bits(), id)).collect();
    let mut pairs = Vec::with_capacity(order.len().min(controls.len()));
    let mut unmatched = Vec::new();
    for (tid, ts) in order {
        let key = ts.to_bits();
        let above = pool.range((key, PersonId(0))..).next().copied();
        let below = pool.range(..(key, PersonId(0))).next_back().map(|&(bits, _)| {
            // smallest id sharing that score
            *pool.range((bits, PersonId(0))..).next().expect("element exists")
        });
        let pick = match (below, above) {
            (None, None) => None,
            (Some(b), None) => Some(b),
            (None, Some(a)) => Some(a),
            (Some(b), Some(a)) => {
                let db = (ts - f64::from_bits(b.0)).abs();
                let da = (f64::from_bits(a.0) - ts).abs();
                if db < da || (db == da && b.1 < a.1) {
                    Some(b)
                } else {
                    Some(a)
                }
            }
        };
        match pick {
            Some(c) => {
                pool.remove(&c);
                pairs.push((tid, c.1));
            }
            None => unmatched.push(tid),
        }
    }
    if !unmatched.is_empty() {
        log::warn!("{} targets left unmatched: no eligible controls remain", unmatched.len());
    }
    MatchResult {
        pairs,
        unmatched_targets: unmatched,
    }
}

/// Non-targets with at least one recorded event, with the provisional end
/// date (their last event) used for pre-matching covariates.
pub fn eligible_controls(store: &EventStore, targets: &[CohortLabel]) -> Result<Vec<(PersonId, NaiveDate)>> {
    let target_ids: HashSet<PersonId> = targets.iter().map(|t| t.person_id).collect();
    let mut out = Vec::new();
    for p in store.participants() {
        if target_ids.contains(&p.person_id) {
            continue;
        }
        if let Some(last) = store.events(p.person_id)?.last() {
            out.push((p.person_id, last.date));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedCohort {
    /// Matched targets followed by their controls, sorted by person id.
    pub cohort: Vec<CohortLabel>,
    pub model: PropensityModel,
    pub result: MatchResult,
    pub balance: Vec<CovariateBalance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
}

/// Fits the propensity model on targets vs eligible controls, matches, and
/// gives each matched control its target's index date.
pub fn match_controls(store: &EventStore, targets: &[CohortLabel], window_days: u32) -> Result<MatchedCohort> {
    let candidates = eligible_controls(store, targets)?;
    let mut target_rows = Vec::with_capacity(targets.len());
    for t in targets {
        let p = store.participant(t.person_id)?;
        target_rows.push(covariates(store, p, t.index_date, window_days)?);
    }
    let mut control_rows = Vec::with_capacity(candidates.len());
    for &(id, end) in &candidates {
        control_rows.push(covariates(store, store.participant(id)?, end, window_days)?);
    }
    let rows: Vec<CovariateRecord> = target_rows.iter().chain(&control_rows).cloned().collect();
    let labels: Vec<bool> = (0..rows.len()).map(|i| i < target_rows.len()).collect();
    let model = fit_propensity(&MATCHING_COVARIATES, &rows, &labels)?;

    let t_scores: Vec<(PersonId, f64)> = targets
        .iter()
        .zip(&target_rows)
        .map(|(t, r)| Ok((t.person_id, model.score(r)?)))
        .collect::<Result<_>>()?;
    let c_scores: Vec<(PersonId, f64)> = candidates
        .iter()
        .zip(&control_rows)
        .map(|(c, r)| Ok((c.0, model.score(r)?)))
        .collect::<Result<_>>()?;
    let result = match_by_score(&t_scores, &c_scores);

    let index_of: HashMap<PersonId, NaiveDate> = targets.iter().map(|t| (t.person_id, t.index_date)).collect();
    let mut cohort = Vec::with_capacity(2 * result.pairs.len());
    for &(t, c) in &result.pairs {
        let index_date = index_of[&t];
        cohort.push(CohortLabel {
            person_id: t,
            label: Label::Target,
            index_date,
            matched_to: None,
        });
        cohort.push(CohortLabel {
            person_id: c,
            label: Label::Control,
            index_date,
            matched_to: Some(t),
        });
    }
    cohort.sort_by_key(|c| c.person_id);

    let control_row_of: HashMap<PersonId, &CovariateRecord> =
        candidates.iter().map(|c| c.0).zip(&control_rows).collect();
    let target_row_of: HashMap<PersonId, &CovariateRecord> =
        targets.iter().map(|t| t.person_id).zip(&target_rows).collect();
    let matched_t: Vec<CovariateRecord> = result.pairs.iter().map(|(t, _)| target_row_of[t].clone()).collect();
    let matched_c: Vec<CovariateRecord> = result.pairs.iter().map(|(_, c)| control_row_of[c].clone()).collect();
    let before = standardized_mean_differences(&target_rows, &control_rows, &model.schema);
    let after = standardized_mean_differences(&matched_t, &matched_c, &model.schema);
    let balance = MATCHING_COVARIATES
        .iter()
        .zip(before.into_iter().zip(after))
        .map(|(name, (b, a))| CovariateBalance {
            covariate: name.to_string(),
            smd_before: b,
            smd_after: a,
        })
        .collect();

    Ok(MatchedCohort {
        cohort,
        model,
        result,
        balance,
    })
}

/// Per covariate, the largest absolute standardized mean difference over its
/// one-hot levels (pooled standard deviation).
pub fn standardized_mean_differences(
    a: &[CovariateRecord],
    b: &[CovariateRecord],
    schema: &[(String, Vec<String>)],
) -> Vec<f64> {
    schema
        .iter()
        .enumerate()
        .map(|(k, (_, levels))| {
            levels
                .iter()
                .map(|level| {
                    let frac = |rows: &[CovariateRecord]| {
                        if rows.is_empty() {
                            0.0
                        } else {
                            rows.iter().filter(|r| &r[k] == level).count() as f64 / rows.len() as f64
                        }
                    };
                    let (pa, pb) = (frac(a), frac(b));
                    let pooled = ((pa * (1.0 - pa) + pb * (1.0 - pb)) / 2.0).sqrt();
                    if pooled == 0.0 {
                        0.0
                    } else {
                        (pa - pb).abs() / pooled
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const COHORT_HEADER: [&str; 4] = ["person_id", "label", "index_date", "matched_to"];

pub fn write_cohort(path: &Path, cohort: &[CohortLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COHORT_HEADER)?;
    for c in cohort {
        w.write_record([
            c.person_id.to_string(),
            c.label.as_str().to_string(),
            c.index_date.format(DATE_FORMAT).to_string(),
            c.matched_to.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortLabel>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |m: &str| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: m.to_string(),
        };
        if record.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let person_id = PersonId(record[0].parse().map_err(|_| bad("bad person_id"))?);
        let label = match &record[1] {
            "target" => Label::Target,
            "control" => Label::Control,
            _ => return Err(bad("bad label")),
        };
        let index_date = parse_date(&record[2]).ok_or_else(|| bad("bad index_date"))?;
        let matched_to = if record[3].is_empty() {
            None
        } else {
            Some(PersonId(record[3].parse().map_err(|_| bad("bad matched_to"))?))
        };
        out.push(CohortLabel {
            person_id,
            label,
            index_date,
            matched_to,
        });
    }
    Ok(out)
}

/// Label counts by covariate level, mostly for logging.
pub fn level_counts(rows: &[CovariateRecord], k: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r[k].clone()).or_insert(0) += 1;
    }
    m
}
