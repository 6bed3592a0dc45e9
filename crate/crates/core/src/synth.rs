//! Synthetic EHR cohort generator with planted, optionally stratum-specific
//! risk concepts and a ground-truth file for end-to-end checks.
//!
//! Every person draws from their own ChaCha stream keyed by `(seed, index)`,
//! so the output is a pure function of the configuration.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Geometric, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::ehr::{age_in_years, ClinicalEvent, Domain, EventStore, EventStoreBuilder, Participant, PersonId, Sex};
use crate::error::{Error, Result};
use crate::evaluate::{AgeBin, Stratum};
use crate::rng::substream;

/// Cohort shares of the six strata in [`Stratum::ALL`] order
/// (291, 1,184, 3,566, 1,295, 4,089 and 7,135 of 17,560).
pub const TABLE_I_SHARES: [f64; 6] = [
    291.0 / 17560.0,
    1184.0 / 17560.0,
    3566.0 / 17560.0,
    1295.0 / 17560.0,
    4089.0 / 17560.0,
    7135.0 / 17560.0,
];

/// Target percentages of the six strata (174/291, 598/1,184, ...).
pub const TABLE_I_TARGET_RATES: [f64; 6] = [
    174.0 / 291.0,
    598.0 / 1184.0,
    1782.0 / 3566.0,
    619.0 / 1295.0,
    2039.0 / 4089.0,
    3568.0 / 7135.0,
];

pub const DEFAULT_CRS_CODES: [&str; 7] = ["J32.0", "J32.1", "J32.2", "J32.3", "J32.4", "J32.8", "J32.9"];

pub fn period_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date")
}

pub fn period_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 12, 31).expect("valid date")
}

fn index_range() -> (NaiveDate, NaiveDate) {
    (
        NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecencyProfile {
    /// Mean days between a target carrier's last occurrence and the index date.
    pub target_mean_days: f64,
    /// Mean gap between occurrences for every other carrier. These carriers
    /// see the concept as a stationary process, so their recency does not
    /// depend on when the index date falls.
    pub background_mean_gap_days: f64,
}

impl Default for RecencyProfile {
    fn default() -> Self {
        Self {
            target_mean_days: 90.0,
            background_mean_gap_days: 240.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSignal {
    /// `None` applies the signal in every stratum.
    pub stratum: Option<Stratum>,
    pub concept_code: String,
    pub target_prevalence: f64,
    pub control_prevalence: f64,
    #[serde(default)]
    pub recency_profile: RecencyProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_participants: usize,
    /// Dictionary size for conditions, procedures and medications.
    pub n_concepts_per_domain: [usize; 3],
    /// Shares of the six strata; the remainder gets sex other/unknown.
    pub strata_proportions: [f64; 6],
    /// Relative target rate per stratum (1.0 = `target_fraction`).
    pub stratum_target_weights: [f64; 6],
    pub target_fraction: f64,
    pub planted_signals: Vec<PlantedSignal>,
    /// Carrier probability of a planted concept outside its stratum, equal
    /// for targets and non-targets.
    pub off_stratum_prevalence: f64,
    pub crs_code_set: Vec<String>,
    pub visits_per_year: f64,
    pub max_concepts_per_visit: usize,
    /// Probability that a non-target carries one isolated CRS code.
    pub isolated_crs_rate: f64,
    /// Shifts race, ethnicity and utilization for targets; 0 disables it.
    pub confounding: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let n_concepts_per_domain = [1500, 2000, 1500];
        Self {
            n_participants: 20_000,
            n_concepts_per_domain,
            strata_proportions: TABLE_I_SHARES,
            stratum_target_weights: TABLE_I_TARGET_RATES.map(|r| r / 0.5),
            target_fraction: 0.44,
            planted_signals: stratified_signals(n_concepts_per_domain, 10, 0.55, 0.08),
            off_stratum_prevalence: 0.1,
            crs_code_set: DEFAULT_CRS_CODES.iter().map(|s| s.to_string()).collect(),
            visits_per_year: 6.0,
            max_concepts_per_visit: 2,
            isolated_crs_rate: 0.02,
            confounding: 0.0,
            seed: 0,
        }
    }
}

pub fn concept_code(domain: Domain, index: usize) -> String {
    let prefix = match domain {
        Domain::Condition => 'C',
        Domain::Procedure => 'P',
        Domain::Medication => 'M',
    };
    format!("{prefix}{index:05}")
}

/// Dictionary codes used for `n` planted concepts, cycling through the three
/// domains and spread evenly within each.
pub fn planted_codes(n_concepts_per_domain: [usize; 3], n: usize) -> Vec<String> {
    let per_domain: Vec<usize> = (0..3).map(|d| (n + 2 - d) / 3).collect();
    let mut taken = [0usize; 3];
    (0..n)
        .map(|j| {
            let d = j % 3;
            let stride = (n_concepts_per_domain[d] / per_domain[d].max(1)).max(1);
            let idx = taken[d] * stride + stride / 2;
            taken[d] += 1;
            concept_code(Domain::ALL[d], idx)
        })
        .collect()
}

/// `per_stratum` signals for each of the six strata.
pub fn stratified_signals(
    n_concepts_per_domain: [usize; 3],
    per_stratum: usize,
    target_prevalence: f64,
    control_prevalence: f64,
) -> Vec<PlantedSignal> {
    let codes = planted_codes(n_concepts_per_domain, 6 * per_stratum);
    codes
        .into_iter()
        .enumerate()
        .map(|(j, concept_code)| PlantedSignal {
            stratum: Some(Stratum::ALL[j % 6]),
            concept_code,
            target_prevalence,
            control_prevalence,
            recency_profile: RecencyProfile::default(),
        })
        .collect()
}

/// Signals with the same effect in every stratum (no heterogeneity).
pub fn shared_signals(
    n_concepts_per_domain: [usize; 3],
    n: usize,
    target_prevalence: f64,
    control_prevalence: f64,
) -> Vec<PlantedSignal> {
    planted_codes(n_concepts_per_domain, n)
        .into_iter()
        .map(|concept_code| PlantedSignal {
            stratum: None,
            concept_code,
            target_prevalence,
            control_prevalence,
            recency_profile: RecencyProfile::default(),
        })
        .collect()
}

fn check_fraction(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(field, format!("{v} is not in [0, 1]")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 {
            return Err(Error::config("synth.n_participants", "must be > 0"));
        }
        let total: f64 = self.strata_proportions.iter().sum();
        for p in self.strata_proportions {
            check_fraction("synth.strata_proportions", p)?;
        }
        if total > 1.0 + 1e-9 {
            return Err(Error::config("synth.strata_proportions", format!("sum {total} exceeds 1")));
        }
        for w in self.stratum_target_weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config("synth.stratum_target_weights", "must be finite and >= 0"));
            }
        }
        check_fraction("synth.target_fraction", self.target_fraction)?;
        check_fraction("synth.off_stratum_prevalence", self.off_stratum_prevalence)?;
        check_fraction("synth.isolated_crs_rate", self.isolated_crs_rate)?;
        check_fraction("synth.confounding", self.confounding)?;
        if !(self.visits_per_year > 0.0 && self.visits_per_year.is_finite()) {
            return Err(Error::config("synth.visits_per_year", "must be > 0"));
        }
        if self.max_concepts_per_visit == 0 {
            return Err(Error::config("synth.max_concepts_per_visit", "must be >= 1"));
        }
        if self.crs_code_set.is_empty() {
            return Err(Error::config("synth.crs_code_set", "must not be empty"));
        }
        let dictionary = self.dictionary_codes();
        let mut planted = HashSet::new();
        for s in &self.planted_signals {
            check_fraction("synth.planted_signals.target_prevalence", s.target_prevalence)?;
            check_fraction("synth.planted_signals.control_prevalence", s.control_prevalence)?;
            if s.target_prevalence == s.control_prevalence {
                return Err(Error::config(
                    "synth.planted_signals",
                    format!("{} has equal target and control prevalence", s.concept_code),
                ));
            }
            let r = s.recency_profile;
            if !(r.target_mean_days >= 0.0 && r.background_mean_gap_days > 0.0) {
                return Err(Error::config("synth.planted_signals.recency_profile", "means must be positive"));
            }
            if !dictionary.contains(&s.concept_code) {
                return Err(Error::InfeasibleConfig(format!(
                    "planted concept {} is not in the concept dictionary",
                    s.concept_code
                )));
            }
            if !planted.insert(s.concept_code.as_str()) {
                return Err(Error::config(
                    "synth.planted_signals",
                    format!("{} is planted twice", s.concept_code),
                ));
            }
        }
        let n_dict: usize = self.n_concepts_per_domain.iter().sum();
        if planted.len() >= n_dict {
            return Err(Error::InfeasibleConfig(format!(
                "{} planted concepts leave no background concepts in a dictionary of {n_dict}",
                planted.len()
            )));
        }
        for c in &self.crs_code_set {
            if dictionary.contains(c) {
                return Err(Error::config("synth.crs_code_set", format!("{c} collides with a dictionary code")));
            }
        }
        Ok(())
    }

    fn dictionary_codes(&self) -> HashSet<String> {
        Domain::ALL
            .iter()
            .zip(self.n_concepts_per_domain)
            .flat_map(|(&d, n)| (0..n).map(move |i| concept_code(d, i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True label per participant, in participant order.
    pub labels: Vec<(PersonId, bool)>,
    /// Planted concepts keyed by stratum key, or `"all"` for shared signals.
    pub planted: BTreeMap<String, Vec<String>>,
    /// Stratum each participant was sampled in (age taken at their anchor
    /// date, which is the index date for targets).
    pub strata: Vec<Option<Stratum>>,
}

pub const ALL_STRATA_KEY: &str = "all";

impl GroundTruth {
    pub fn planted_codes(&self) -> BTreeSet<String> {
        self.planted.values().flatten().cloned().collect()
    }

    pub fn write(&self, labels_path: &Path, planted_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(labels_path)?;
        w.write_record(["person_id", "true_label"])?;
        for (id, label) in &self.labels {
            w.write_record([id.to_string(), u8::from(*label).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(labels_path, e))?;
        let mut w = csv::Writer::from_path(planted_path)?;
        w.write_record(["stratum", "concept_code"])?;
        for (stratum, codes) in &self.planted {
            for c in codes {
                w.write_record([stratum, c])?;
            }
        }
        w.flush().map_err(|e| Error::io(planted_path, e))?;
        Ok(())
    }

    pub fn read_planted(planted_path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
        let mut r = csv::Reader::from_path(planted_path)?;
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::MalformedRow {
                    path: planted_path.to_path_buf(),
                    line: rec.position().map_or(0, |p| p.line()),
                    message: "expected stratum,concept_code".into(),
                });
            }
            out.entry(rec[0].to_string()).or_default().push(rec[1].to_string());
        }
        Ok(out)
    }
}

pub struct Synthetic {
    pub store: EventStore,
    pub truth: GroundTruth,
}

impl Synthetic {
    /// Writes participants.csv, events.csv, ground_truth.csv and
    /// planted_concepts.csv into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store
            .write_csv(&dir.join("participants.csv"), &dir.join("events.csv"))?;
        self.truth
            .write(&dir.join("ground_truth.csv"), &dir.join("planted_concepts.csv"))
    }
}

struct Background {
    codes: Vec<(String, Domain)>,
    popularity: WeightedIndex<f64>,
}

impl Background {
    fn new(config: &SynthConfig) -> Result<Self> {
        let planted: HashSet<&str> = config.planted_signals.iter().map(|s| s.concept_code.as_str()).collect();
        let mut codes: Vec<(String, Domain)> = Domain::ALL
            .iter()
            .zip(config.n_concepts_per_domain)
            .flat_map(|(&d, n)| (0..n).map(move |i| (concept_code(d, i), d)))
            .filter(|(c, _)| !planted.contains(c.as_str()))
            .collect();
        // popularity rank is independent of the code index
        codes.shuffle(&mut substream(config.seed, "synth.dictionary", 0));
        let weights: Vec<f64> = (0..codes.len()).map(|r| 1.0 / (r as f64 + 20.0).powf(0.9)).collect();
        let popularity =
            WeightedIndex::new(&weights).map_err(|e| Error::InfeasibleConfig(format!("background weights: {e}")))?;
        Ok(Self { codes, popularity })
    }
}

struct Person {
    participant: Participant,
    stratum: Option<Stratum>,
    is_target: bool,
    events: Vec<(usize, NaiveDate)>,
}

fn uniform_date(rng: &mut ChaCha8Rng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days();
    from + Duration::days(rng.random_range(0..=span))
}

fn birth_date_for(rng: &mut ChaCha8Rng, age_bin: AgeBin, anchor: NaiveDate) -> NaiveDate {
    let (lo, hi) = age_bin.sampling_range();
    let age = rng.random_range(lo..=hi);
    // latest birth date giving `age` at the anchor, minus up to a year
    let latest = anchor
        .checked_sub_months(chrono::Months::new(12 * age as u32))
        .expect("date in range");
    let birth = latest - Duration::days(rng.random_range(0..365));
    debug_assert_eq!(age_in_years(birth, anchor), age);
    birth
}

fn stationary_dates(rng: &mut ChaCha8Rng, mean_gap: f64) -> Vec<NaiveDate> {
    let (start, end) = (period_start(), period_end());
    let span = (end - start).num_days() as f64;
    let gap = Exp::new(1.0 / mean_gap).expect("positive rate");
    let mut t = gap.sample(rng);
    let mut out = Vec::new();
    while t <= span {
        out.push(start + Duration::days(t as i64));
        t += gap.sample(rng);
    }
    if out.is_empty() {
        out.push(uniform_date(rng, start, end));
    }
    out
}

const RACES: [&str; 4] = ["white", "black", "asian", "other"];
const RACE_WEIGHTS: [f64; 4] = [0.6, 0.2, 0.08, 0.12];
const ETHNICITIES: [&str; 2] = ["hispanic", "not_hispanic"];

fn generate_person(
    config: &SynthConfig,
    background: &Background,
    code_index: &BTreeMap<&str, usize>,
    crs_base: usize,
    i: usize,
) -> Person {
    let mut rng = substream(config.seed, "synth.person", i as u64);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut stratum = None;
    for (s, p) in Stratum::ALL.iter().zip(config.strata_proportions) {
        acc += p;
        if u < acc {
            stratum = Some(*s);
            break;
        }
    }
    let (sex, age_bin, weight) = match stratum {
        Some(s) => (s.sex, s.age_bin, config.stratum_target_weights[s.index()]),
        None => (Sex::OtherUnknown, AgeBin::ALL[rng.random_range(0..3)], 1.0),
    };
    let p_target = (config.target_fraction * weight).clamp(0.0, 1.0);
    let is_target = rng.random::<f64>() < p_target;
    let (lo, hi) = index_range();
    let anchor = uniform_date(&mut rng, lo, hi);
    let birth_date = birth_date_for(&mut rng, age_bin, anchor);

    let c = config.confounding;
    let race_weights: Vec<f64> = RACE_WEIGHTS
        .iter()
        .enumerate()
        .map(|(k, &w)| if is_target && k == 0 { w * (1.0 + 3.0 * c) } else { w })
        .collect();
    let race = RACES[WeightedIndex::new(&race_weights).expect("positive weights").sample(&mut rng)];
    let p_hispanic = if is_target { 0.18 * (1.0 - c) } else { 0.18 };
    let ethnicity = ETHNICITIES[usize::from(rng.random::<f64>() >= p_hispanic)];

    let participant = Participant {
        person_id: PersonId(i as u64 + 1),
        sex_at_birth: sex,
        birth_date,
        race: race.to_string(),
        ethnicity: ethnicity.to_string(),
    };

    let mut events: Vec<(usize, NaiveDate)> = Vec::new();
    let (start, end) = (period_start(), period_end());
    let years = (end - start).num_days() as f64 / 365.25;
    let utilization = LogNormal::new(0.0, 0.5).expect("valid").sample(&mut rng) * if is_target { 1.0 + c } else { 1.0 };
    let n_visits = Poisson::new(config.visits_per_year * years * utilization)
        .expect("positive mean")
        .sample(&mut rng) as usize;
    for _ in 0..n_visits {
        let date = uniform_date(&mut rng, start, end);
        for _ in 0..rng.random_range(1..=config.max_concepts_per_visit) {
            events.push((background.popularity.sample(&mut rng), date));
        }
    }

    for signal in &config.planted_signals {
        let in_stratum = signal.stratum.is_none() || signal.stratum == stratum;
        let prevalence = match (in_stratum, is_target) {
            (true, true) => signal.target_prevalence,
            (true, false) => signal.control_prevalence,
            (false, _) => config.off_stratum_prevalence,
        };
        if rng.random::<f64>() >= prevalence {
            continue;
        }
        let idx = code_index[signal.concept_code.as_str()];
        if in_stratum && is_target {
            let mean = signal.recency_profile.target_mean_days;
            let days = Geometric::new(1.0 / (mean + 1.0)).expect("valid").sample(&mut rng).min(729);
            events.push((idx, anchor - Duration::days(days as i64)));
        } else {
            for d in stationary_dates(&mut rng, signal.recency_profile.background_mean_gap_days) {
                events.push((idx, d));
            }
        }
    }

    let n_crs = config.crs_code_set.len();
    if is_target {
        let second = anchor + Duration::days(rng.random_range(1..=700));
        events.push((crs_base + rng.random_range(0..n_crs), anchor));
        events.push((crs_base + rng.random_range(0..n_crs), second));
    } else if rng.random::<f64>() < config.isolated_crs_rate {
        events.push((crs_base + rng.random_range(0..n_crs), uniform_date(&mut rng, start, end)));
    }

    // nobody has events before turning 18
    events.retain(|(_, d)| *d >= birth_date);
    Person {
        participant,
        stratum,
        is_target,
        events,
    }
}

pub fn generate(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let background = Background::new(config)?;
    // all codes: background, then planted, then CRS
    let mut codes: Vec<(String, Domain)> = background.codes.clone();
    for s in &config.planted_signals {
        let d = match s.concept_code.as_bytes()[0] {
            b'C' => Domain::Condition,
            b'P' => Domain::Procedure,
            _ => Domain::Medication,
        };
        codes.push((s.concept_code.clone(), d));
    }
    let crs_base = codes.len();
    for c in &config.crs_code_set {
        codes.push((c.clone(), Domain::Condition));
    }
    let code_index: BTreeMap<&str, usize> = codes[..crs_base]
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (c.as_str(), i))
        .collect();

    let mut builder = EventStoreBuilder::new();
    let mut labels = Vec::with_capacity(config.n_participants);
    let mut strata = Vec::with_capacity(config.n_participants);
    for i in 0..config.n_participants {
        let person = generate_person(config, &background, &code_index, crs_base, i);
        let id = person.participant.person_id;
        strata.push(person.stratum);
        labels.push((id, person.is_target));
        builder.add_participant(person.participant)?;
        for (idx, date) in person.events {
            let (code, domain) = &codes[idx];
            builder.add_event(&ClinicalEvent {
                person_id: id,
                concept_code: code.clone(),
                domain: *domain,
                event_date: date,
            })?;
        }
    }

    let mut planted: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in &config.planted_signals {
        let key = s.stratum.map_or_else(|| ALL_STRATA_KEY.to_string(), Stratum::key);
        planted.entry(key).or_default().push(s.concept_code.clone());
    }
    Ok(Synthetic {
        store: builder.build(),
        truth: GroundTruth {
            labels,
            planted,
            strata,
        },
    })
}

#[cfg(test)]
mod tests;
