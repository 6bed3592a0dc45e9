//! Factored Tree-structured Parzen Estimator search over GBDT parameters.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::boosting::GbdtParams;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    IntUniform,
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub kind: ParamKind,
    pub low: f64,
    pub high: f64,
}

impl Dimension {
    pub fn new(name: &str, kind: ParamKind, low: f64, high: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            low,
            high,
        }
    }

    /// Bounds of the space the Parzen estimators work in. Integer ranges are
    /// widened by half a step so rounding gives every integer equal mass.
    fn internal_bounds(&self) -> (f64, f64) {
        match self.kind {
            ParamKind::IntUniform => (self.low - 0.5, self.high + 0.5),
            ParamKind::Uniform => (self.low, self.high),
            ParamKind::LogUniform => (self.low.ln(), self.high.ln()),
        }
    }

    fn to_internal(&self, v: f64) -> f64 {
        match self.kind {
            ParamKind::LogUniform => v.ln(),
            _ => v,
        }
    }

    fn from_internal(&self, z: f64) -> f64 {
        match self.kind {
            ParamKind::IntUniform => z.round().clamp(self.low, self.high),
            ParamKind::Uniform => z.clamp(self.low, self.high),
            ParamKind::LogUniform => z.exp().clamp(self.low, self.high),
        }
    }
}

pub const TUNABLE: [&str; 9] = [
    "n_estimators",
    "max_depth",
    "learning_rate",
    "subsample",
    "colsample_bytree",
    "reg_alpha",
    "reg_lambda",
    "gamma",
    "min_child_weight",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        use ParamKind::*;
        Self {
            dimensions: vec![
                Dimension::new("n_estimators", IntUniform, 100.0, 400.0),
                Dimension::new("max_depth", IntUniform, 4.0, 12.0),
                Dimension::new("learning_rate", LogUniform, 0.005, 0.1),
                Dimension::new("subsample", Uniform, 0.5, 1.0),
                Dimension::new("colsample_bytree", Uniform, 0.5, 1.0),
                Dimension::new("reg_alpha", LogUniform, 1e-4, 1.0),
            ],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::config("tuning.space", "search space is empty"));
        }
        for (i, d) in self.dimensions.iter().enumerate() {
            let field = format!("tuning.space.{}", d.name);
            if self.dimensions[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::config(&field, "listed twice"));
            }
            if !(d.low.is_finite() && d.high.is_finite() && d.low < d.high) {
                return Err(Error::config(&field, "requires finite bounds with low < high"));
            }
            if d.kind == ParamKind::LogUniform && d.low <= 0.0 {
                return Err(Error::config(&field, "log-uniform bounds must be positive"));
            }
            if d.kind == ParamKind::IntUniform && (d.low.fract() != 0.0 || d.high.fract() != 0.0) {
                return Err(Error::config(&field, "integer bounds must be whole numbers"));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus a check that every dimension
    /// names a parameter [`apply`](Self::apply) understands.
    pub fn validate_for_gbdt(&self) -> Result<()> {
        self.validate()?;
        match self.dimensions.iter().find(|d| !TUNABLE.contains(&d.name.as_str())) {
            Some(d) => Err(Error::config(format!("tuning.space.{}", d.name), "not a tunable GBDT parameter")),
            None => Ok(()),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.dimensions.iter().map(|d| d.name.as_str()).collect()
    }

    /// Copies `base` with the point's values written over the named fields.
    pub fn apply(&self, point: &[f64], base: &GbdtParams) -> Result<GbdtParams> {
        if point.len() != self.dimensions.len() {
            return Err(Error::SchemaMismatch(format!(
                "point has {} values for {} dimensions",
                point.len(),
                self.dimensions.len()
            )));
        }
        let mut p = base.clone();
        for (d, &v) in self.dimensions.iter().zip(point) {
            match d.name.as_str() {
                "n_estimators" => p.n_estimators = v as usize,
                "max_depth" => p.max_depth = v as usize,
                "learning_rate" => p.learning_rate = v,
                "subsample" => p.subsample = v,
                "colsample_bytree" => p.colsample_bytree = v,
                "reg_alpha" => p.reg_alpha = v,
                "reg_lambda" => p.reg_lambda = v,
                "gamma" => p.gamma = v,
                "min_child_weight" => p.min_child_weight = v,
                other => return Err(Error::config(format!("tuning.space.{other}"), "not a tunable GBDT parameter")),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    pub n_trials: usize,
    pub gamma_fraction: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    /// Weight of the wide prior component in each Parzen mixture.
    pub prior_weight: f64,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            gamma_fraction: 0.25,
            n_startup: 20,
            n_candidates: 24,
            prior_weight: 1.0,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::config("tuning.tpe.n_trials", "must be >= 1"));
        }
        if !(self.gamma_fraction > 0.0 && self.gamma_fraction < 1.0) {
            return Err(Error::config("tuning.tpe.gamma_fraction", "must lie in (0, 1)"));
        }
        if self.n_startup >= self.n_trials && self.n_trials > 1 {
            return Err(Error::config("tuning.tpe.n_startup", "must be below n_trials"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("tuning.tpe.n_candidates", "must be >= 1"));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::config("tuning.tpe.prior_weight", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Values aligned with the search space dimensions.
    pub values: Vec<f64>,
    /// Objective to maximize; `-inf` for failed trials.
    pub objective: f64,
    pub status: TrialStatus,
}

impl Trial {
    pub fn is_complete(&self) -> bool {
        self.status == TrialStatus::Complete
    }
}

/// Truncated-Gaussian mixture on `[a, b]`.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    /// Probability mass of each component inside the bounds.
    mass: Vec<f64>,
    a: f64,
    b: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl Parzen {
    fn fit(obs: &[f64], a: f64, b: f64, prior_weight: f64) -> Self {
        let range = b - a;
        let prior_mu = 0.5 * (a + b);
        let mut points: Vec<(f64, bool)> = obs.iter().map(|&x| (x, false)).collect();
        points.push((prior_mu, true));
        points.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let n = obs.len();
        let min_sigma = range / (n.clamp(1, 100) as f64);
        let mut mus = Vec::with_capacity(n + 1);
        let mut sigmas = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n + 1);
        for (i, &(x, is_prior)) in points.iter().enumerate() {
            mus.push(x);
            if is_prior {
                sigmas.push(range);
                weights.push(prior_weight);
                continue;
            }
            let left = if i > 0 { x - points[i - 1].0 } else { 0.0 };
            let right = if i + 1 < points.len() { points[i + 1].0 - x } else { 0.0 };
            sigmas.push(left.max(right).clamp(min_sigma, range));
            weights.push(1.0);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| (normal_cdf((b - m) / s) - normal_cdf((a - m) / s)).max(1e-300))
            .collect();
        Self {
            mus,
            sigmas,
            weights,
            mass,
            a,
            b,
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for k in 0..self.mus.len() {
            let z = (x - self.mus[k]) / self.sigmas[k];
            p += self.weights[k] * (-0.5 * z * z).exp()
                / (self.sigmas[k] * (2.0 * std::f64::consts::PI).sqrt() * self.mass[k]);
        }
        p.max(1e-300).ln()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        for _ in 0..1000 {
            let x = self.mus[k] + self.sigmas[k] * standard_normal(rng);
            if (self.a..=self.b).contains(&x) {
                return x;
            }
        }
        self.mus[k].clamp(self.a, self.b)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

fn random_point(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    space
        .dimensions
        .iter()
        .map(|d| {
            let (a, b) = d.internal_bounds();
            d.from_internal(a + (b - a) * rng.random::<f64>())
        })
        .collect()
}

/// Number of complete trials that form the "good" density.
pub fn n_good(n_complete: usize, gamma_fraction: f64) -> usize {
    (gamma_fraction * n_complete as f64).ceil() as usize
}

fn best_first(a: &Trial, b: &Trial) -> Ordering {
    b.objective.total_cmp(&a.objective).then(a.index.cmp(&b.index))
}

/// Proposes the next point. Uniform until `n_startup` trials exist, then the
/// candidate drawn from the good density with the largest l(x)/g(x).
pub fn tpe_suggest(history: &[Trial], space: &SearchSpace, config: &TpeConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut complete: Vec<&Trial> = history.iter().filter(|t| t.is_complete()).collect();
    let good_n = n_good(complete.len(), config.gamma_fraction);
    if history.len() < config.n_startup || good_n == 0 {
        return random_point(space, rng);
    }
    complete.sort_by(|a, b| best_first(a, b));
    let good: Vec<&Trial> = complete[..good_n].to_vec();
    let mut bad: Vec<&Trial> = complete[good_n..].to_vec();
    bad.extend(history.iter().filter(|t| !t.is_complete()));

    let mut ls = Vec::with_capacity(space.dimensions.len());
    let mut gs = Vec::with_capacity(space.dimensions.len());
    for (k, d) in space.dimensions.iter().enumerate() {
        let (a, b) = d.internal_bounds();
        let g_obs: Vec<f64> = good.iter().map(|t| d.to_internal(t.values[k])).collect();
        let b_obs: Vec<f64> = bad.iter().map(|t| d.to_internal(t.values[k])).collect();
        ls.push(Parzen::fit(&g_obs, a, b, config.prior_weight));
        gs.push(Parzen::fit(&b_obs, a, b, config.prior_weight));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..config.n_candidates {
        let z: Vec<f64> = ls.iter().map(|l| l.sample(rng)).collect();
        let score: f64 = z
            .iter()
            .zip(ls.iter().zip(&gs))
            .map(|(&x, (l, g))| l.log_pdf(x) - g.log_pdf(x))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, z));
        }
    }
    let (_, z) = best.expect("at least one candidate");
    space
        .dimensions
        .iter()
        .zip(z)
        .map(|(d, x)| d.from_internal(x))
        .collect()
}

/// Runs exactly `n_trials` evaluations, maximizing `objective`. An error or
/// non-finite value marks the trial failed. Trial `t` draws from its own
/// substream of the configured seed.
pub fn optimize<F>(mut objective: F, space: &SearchSpace, config: &TpeConfig) -> Result<(Trial, Vec<Trial>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    space.validate()?;
    config.validate()?;
    let mut history: Vec<Trial> = Vec::with_capacity(config.n_trials);
    for t in 0..config.n_trials {
        let mut rng = substream(config.seed, "tpe.suggest", t as u64);
        let values = tpe_suggest(&history, space, config, &mut rng);
        let (objective, status) = match objective(&values) {
            Ok(v) if v.is_finite() => (v, TrialStatus::Complete),
            Ok(v) => {
                log::warn!("trial {t} returned non-finite objective {v}; marked failed");
                (f64::NEG_INFINITY, TrialStatus::Failed)
            }
            Err(e) => {
                log::warn!("trial {t} failed: {e}");
                (f64::NEG_INFINITY, TrialStatus::Failed)
            }
        };
        log::debug!("trial {t}: {values:?} -> {objective}");
        history.push(Trial {
            index: t,
            values,
            objective,
            status,
        });
    }
    let best = history
        .iter()
        .filter(|t| t.is_complete())
        .min_by(|a, b| best_first(a, b))
        .cloned()
        .ok_or(Error::AllTrialsFailed(config.n_trials))?;
    Ok((best, history))
}

pub fn write_trials(path: &Path, space: &SearchSpace, trials: &[Trial]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trial_index".to_string()];
    header.extend(space.names().iter().map(|s| s.to_string()));
    header.extend(["objective".to_string(), "status".to_string()]);
    w.write_record(&header)?;
    for t in trials {
        let mut rec = vec![t.index.to_string()];
        rec.extend(t.values.iter().map(|v| v.to_string()));
        rec.push(t.objective.to_string());
        rec.push(
            match t.status {
                TrialStatus::Complete => "complete",
                TrialStatus::Failed => "failed",
            }
            .to_string(),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
