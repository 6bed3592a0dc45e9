use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::benchmark::{GroupReport, MeanStd};
use super::{thousands, CohortStatistics, Metrics};
use crate::cohort::CovariateBalance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSeeds {
    pub master: u64,
    /// Seeds handed to each stage, derived from `master`.
    pub derived: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub paper_mode: bool,
    pub stage1: usize,
    pub stage2: usize,
    pub stage1_by_domain: BTreeMap<String, usize>,
    pub heterogeneity_tested: usize,
    pub heterogeneity_significant: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub regime: String,
    pub n_trials: usize,
    pub n_failed: usize,
    pub best_trial: usize,
    pub best_mean_fold_auc: f64,
}

/// Everything the `report` stage writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: ReportSeeds,
    pub cohort: CohortStatistics,
    pub balance: Vec<CovariateBalance>,
    pub unmatched_targets: usize,
    pub selection: SelectionSummary,
    pub tuning: Vec<TuningSummary>,
    pub benchmark: GroupReport,
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "\u{2014}".to_string(), |v| format!("{v:.digits$}"))
}

fn signed(x: Option<f64>) -> String {
    x.map_or_else(|| "\u{2014}".to_string(), |v| format!("{v:+.4}"))
}

fn metrics_row(out: &mut String, name: &str, m: &Metrics) {
    let _ = writeln!(
        out,
        "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} | {} | {} |",
        m.auc, m.f1, m.sensitivity, m.specificity, m.tp, m.fp, m.tn, m.fn_
    );
}

fn mean_std(m: Option<MeanStd>) -> String {
    m.map_or_else(|| "\u{2014}".to_string(), |m| format!("{:.4} ± {:.4} (n={})", m.mean, m.std, m.n))
}

/// Human-readable companion to `report.json`.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    let b = &report.benchmark;
    let _ = writeln!(out, "# CRS risk prediction report\n");
    let _ = writeln!(out, "Master seed: {}\n", report.seeds.master);

    let _ = writeln!(out, "## Cohort\n");
    let _ = writeln!(out, "| Group | n | Targets (%) |");
    let _ = writeln!(out, "|---|---:|---:|");
    for c in report.cohort.strata.iter().chain([&report.cohort.remainder, &report.cohort.total]) {
        let _ = writeln!(out, "| {} | {} | {} |", c.group, thousands(c.n), c.formatted());
    }
    let _ = writeln!(out, "\nUnmatched targets: {}\n", report.unmatched_targets);
    if !report.balance.is_empty() {
        let _ = writeln!(out, "| Covariate | SMD before | SMD after |");
        let _ = writeln!(out, "|---|---:|---:|");
        for bal in &report.balance {
            let _ = writeln!(out, "| {} | {:.4} | {:.4} |", bal.covariate, bal.smd_before, bal.smd_after);
        }
        out.push('\n');
    }

    let s = &report.selection;
    let _ = writeln!(out, "## Feature selection\n");
    let _ = writeln!(
        out,
        "Stage 1 kept {} concepts ({}), stage 2 kept {}.",
        s.stage1,
        s.stage1_by_domain
            .iter()
            .map(|(d, n)| format!("{d}: {n}"))
            .collect::<Vec<_>>()
            .join(", "),
        s.stage2
    );
    let _ = writeln!(
        out,
        "{} of {} tested concepts differ across strata at alpha = {}.",
        s.heterogeneity_significant, s.heterogeneity_tested, s.alpha
    );
    if s.paper_mode {
        let _ = writeln!(out, "Selection ran once on the full cohort (paper mode).");
    }
    out.push('\n');

    let _ = writeln!(out, "## Global vs stratum models ({}-fold CV)\n", b.folds);
    let _ = writeln!(out, "| Group | n | Share | AUC global | AUC stratum | Delta |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|");
    for r in &b.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.group,
            thousands(r.n),
            opt(r.share, 3),
            opt(r.auc_global, 4),
            opt(r.auc_group, 4),
            signed(r.delta)
        );
    }
    if let Some(t) = &b.total {
        let _ = writeln!(
            out,
            "| Weighted total | | {:.3} | {:.4} | {:.4} | {:+.4} |",
            t.share, t.auc_global, t.auc_group, t.delta
        );
    }
    let _ = writeln!(out, "\nRemainder (not stratified): {}\n", b.remainder_n);

    let _ = writeln!(out, "## Pooled out-of-fold metrics (threshold {})\n", b.threshold);
    let _ = writeln!(out, "| Model | AUC | F1 | Sensitivity | Specificity | TP | FP | TN | FN |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    metrics_row(&mut out, "Global", &b.overall_global);
    metrics_row(&mut out, "Stratified", &b.overall_stratified);
    let _ = writeln!(out, "\nPer-fold AUC, global: {}", mean_std(b.fold_auc_global));
    let _ = writeln!(out, "Per-fold AUC, stratified: {}\n", mean_std(b.fold_auc_stratified));

    if !report.tuning.is_empty() {
        let _ = writeln!(out, "## Tuning\n");
        let _ = writeln!(out, "| Regime | Trials | Failed | Best trial | Mean fold AUC |");
        let _ = writeln!(out, "|---|---:|---:|---:|---:|");
        for t in &report.tuning {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.4} |",
                t.regime, t.n_trials, t.n_failed, t.best_trial, t.best_mean_fold_auc
            );
        }
    }
    out
}
