use super::*;
use crate::boosting::GbdtParams;
use crate::featurize::{FeatureColumn, RecencyFeatureMatrix, SENTINEL};
use crate::tune::{Dimension, ParamKind, SearchSpace, TpeConfig};
use crate::{Domain, PersonId};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_small_example() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    assert_abs_diff_eq!(auc(&scores, &labels).unwrap(), 0.75, epsilon = 1e-12);
}

#[test]
fn auc_ties_count_half() {
    let scores = [0.5, 0.5, 0.5, 0.5];
    let labels = [true, false, true, false];
    assert_abs_diff_eq!(auc(&scores, &labels).unwrap(), 0.5, epsilon = 1e-12);
}

#[test]
fn auc_rejects_single_class_and_nan() {
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass(_))));
    assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    assert!(auc(&[0.1], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        raw in prop::collection::vec((0u8..20, any::<bool>()), 2..120)
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0) / 7.0).collect();
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_map_and_complements_on_negation(
        raw in prop::collection::vec((-50.0f64..50.0, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s / 10.0).exp())).collect();
        prop_assert!((auc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&negated, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn roc_area_equals_auc(
        raw in prop::collection::vec((0u8..10, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0)).collect();
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let pts = roc_points(&scores, &labels).unwrap();
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        prop_assert!((area - auc(&scores, &labels).unwrap()).abs() < 1e-12);
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn kfold_balances_every_key(
        keys in prop::collection::vec(0u8..4, 10..300),
        k in 2usize..8,
        seed in any::<u64>(),
    ) {
        let folds = stratified_kfold_by(&keys, k, seed).unwrap();
        prop_assert!(folds.iter().all(|&f| f < k));
        let mut sizes = vec![0usize; k];
        for &f in &folds { sizes[f] += 1; }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for key in 0..4u8 {
            let mut per = vec![0usize; k];
            for (i, &f) in folds.iter().enumerate() {
                if keys[i] == key { per[f] += 1; }
            }
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn kfold_is_seeded() {
    let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
    assert_eq!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 9).unwrap());
    assert_ne!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 10).unwrap());
    assert!(stratified_kfold(&labels, 1, 9).is_err());
    assert!(stratified_kfold(&[true, true, false], 2, 0).is_err());
}

#[test]
fn threshold_metrics_counts() {
    let scores = [0.9, 0.5, 0.49, 0.2, 0.7, 0.1];
    let labels = [true, true, true, false, false, false];
    let m = threshold_metrics(&scores, &labels, 0.5).unwrap();
    assert_eq!((m.tp, m.fp, m.tn, m.fn_), (2, 1, 2, 1));
    assert_abs_diff_eq!(m.sensitivity, 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.specificity, 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.f1, 4.0 / 6.0, epsilon = 1e-12);
    let json = serde_json::to_string(&m).unwrap();
    assert!(json.contains("\"fn\":1"));
}

proptest! {
    #[test]
    fn f1_is_harmonic_mean_of_precision_and_recall(tp in 1u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        let m = Metrics::from_counts(0.5, tp, fp, tn, fn_);
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        prop_assert!((m.f1 - 2.0 * precision * recall / (precision + recall)).abs() < 1e-12);
        prop_assert!((m.sensitivity - recall).abs() < 1e-15);
    }
}

#[test]
fn weighted_totals_reproduce_published_table() {
    let shares = [0.074, 0.233, 0.406, 0.017, 0.067, 0.203];
    let group = [0.8789, 0.8218, 0.8546, 0.9548, 0.8225, 0.8435];
    let global = [0.8713, 0.7940, 0.8410, 0.9286, 0.8109, 0.8291];
    assert_abs_diff_eq!(weighted_total(&group, &shares).unwrap(), 0.8461, epsilon = 5e-4);
    assert_abs_diff_eq!(weighted_total(&global, &shares).unwrap(), 0.8293, epsilon = 5e-4);
    assert!(weighted_total(&group, &[0.5; 6]).is_err());
    assert!(weighted_total(&group[..2], &shares).is_err());
}

#[test]
fn cohort_table_percentages() {
    let stats = statistics_from_counts(&[
        (291, 174),
        (1184, 598),
        (3566, 1782),
        (1295, 619),
        (4089, 2039),
        (7135, 3568),
        (0, 0),
    ]);
    assert_eq!(stats.strata[0].formatted(), "174 (59.8%)");
    assert_eq!(stats.strata[3].formatted(), "619 (47.8%)");
    assert_eq!(stats.strata[5].formatted(), "3,568 (50.0%)");
    assert_eq!(stats.remainder.formatted(), "\u{2014}");
    assert_eq!(stats.total.n, 17560);
    assert_eq!(thousands(17560), "17,560");
    assert_eq!(thousands(999), "999");
    assert_eq!(thousands(1_000_000), "1,000,000");
}

#[test]
fn strata_boundaries() {
    let date = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
    let person = |sex, birth: (i32, u32, u32)| Participant {
        person_id: PersonId(1),
        birth_date: NaiveDate::from_ymd_opt(birth.0, birth.1, birth.2).unwrap(),
        sex_at_birth: sex,
        race: "white".into(),
        ethnicity: "not_hispanic".into(),
    };
    let young = assign_stratum(&person(Sex::Male, (1980, 6, 2)), date).unwrap();
    assert_eq!(young.age_bin, AgeBin::Young);
    let forty = assign_stratum(&person(Sex::Female, (1980, 6, 1)), date).unwrap();
    assert_eq!(forty.age_bin, AgeBin::Middle);
    assert_eq!(forty.key(), "female_40-60");
    let sixty = assign_stratum(&person(Sex::Male, (1960, 6, 1)), date).unwrap();
    assert_eq!(sixty.age_bin, AgeBin::Older);
    assert_eq!(sixty.to_string(), "Male 60+");
    assert!(assign_stratum(&person(Sex::OtherUnknown, (1960, 6, 1)), date).is_none());
    for s in Stratum::ALL {
        assert_eq!(Stratum::parse(&s.key()), Some(s));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Stratum>(&json).unwrap(), s);
    }
    assert_eq!(Regime::parse("global"), Some(Regime::Global));
}

#[test]
fn thin_curve_keeps_ends() {
    let pts: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64 / 100.0, i as f64 / 100.0)).collect();
    let thin = thin_curve(&pts, 11);
    assert_eq!(thin.len(), 11);
    assert_eq!(thin[0], (0.0, 0.0));
    assert_eq!(*thin.last().unwrap(), (1.0, 1.0));
}

#[test]
fn fold_summary_uses_sample_std() {
    let m = fold_summary(&[Some(1.0), None, Some(3.0)]).unwrap();
    assert_eq!(m.n, 2);
    assert_abs_diff_eq!(m.mean, 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.std, 2f64.sqrt(), epsilon = 1e-12);
    assert!(fold_summary(&[None]).is_none());
}

/// Two strata whose labels depend on different concepts.
fn heterogeneous_matrix(n_per: usize, seed: u64) -> (RecencyFeatureMatrix, Vec<Option<Stratum>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata_used = [Stratum::ALL[0], Stratum::ALL[4]];
    let mut cells: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 2];
    let mut labels = Vec::new();
    let mut strata = Vec::new();
    for (si, s) in strata_used.iter().enumerate() {
        for _ in 0..n_per {
            let row = labels.len() as u32;
            let y = rng.random_bool(0.5);
            for (c, col) in cells.iter_mut().enumerate() {
                let p = if c == si { if y { 0.8 } else { 0.1 } } else { 0.3 };
                if rng.random_bool(p) {
                    col.push((row, rng.random_range(1..700)));
                }
            }
            labels.push(y);
            strata.push(Some(*s));
        }
    }
    let columns = vec![
        FeatureColumn { concept_code: "C1".into(), domain: Domain::Condition },
        FeatureColumn { concept_code: "C2".into(), domain: Domain::Condition },
    ];
    let ids = (1..=labels.len() as u64).map(PersonId).collect();
    let m = RecencyFeatureMatrix::new(ids, columns, cells, labels, 730).unwrap();
    (m, strata)
}

#[test]
fn benchmark_finds_stratum_specific_signal() {
    let (m, strata) = heterogeneous_matrix(150, 3);
    assert!(m.dense_column(0).iter().any(|&v| v == SENTINEL));
    let codes = vec!["C1".to_string(), "C2".to_string()];
    let eval = EvaluationConfig { folds: 3, ..Default::default() };
    let tuning = TuningConfig {
        space: SearchSpace {
            dimensions: vec![Dimension::new("max_depth", ParamKind::IntUniform, 1.0, 3.0)],
        },
        tpe: TpeConfig { n_trials: 3, n_startup: 2, seed: 1, ..Default::default() },
    };
    let base = GbdtParams { n_estimators: 20, ..Default::default() };
    let inputs = BenchmarkInputs {
        matrix: &m,
        strata: &strata,
        features: FeatureSource::Fixed(&codes),
        evaluation: &eval,
        tuning: &tuning,
        base_params: &base,
        seed: 11,
    };
    let (report, tunings) = run_benchmark(&inputs).unwrap();
    assert_eq!(tunings.len(), 3);
    let evaluated: Vec<&GroupRow> = report.rows.iter().filter(|r| r.auc_group.is_some()).collect();
    assert_eq!(evaluated.len(), 2);
    for r in &evaluated {
        assert!(r.auc_group.unwrap() > 0.75, "{r:?}");
        assert_abs_diff_eq!(r.share.unwrap(), 0.5, epsilon = 1e-12);
    }
    let skipped = report.rows.iter().filter(|r| r.auc_group.is_none()).count();
    assert_eq!(skipped, 4);
    let total = report.total.as_ref().unwrap();
    assert_abs_diff_eq!(total.delta, total.auc_group - total.auc_global, epsilon = 1e-15);
    assert_eq!(report.overall_global.tp + report.overall_global.fn_, m.labels().iter().filter(|&&l| l).count() as u64);

    let (again, _) = run_benchmark(&inputs).unwrap();
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn cv_context_rejects_tiny_classes() {
    let (m, strata) = heterogeneous_matrix(3, 1);
    let codes = vec!["C1".to_string()];
    assert!(CvContext::build(&m, &strata, 10, FeatureSource::Fixed(&codes), 0).is_err());
    assert!(CvContext::build(&m, &strata[1..], 2, FeatureSource::Fixed(&codes), 0).is_err());
}

#[test]
fn benchmark_report_needs_global_params() {
    let (m, strata) = heterogeneous_matrix(30, 2);
    let codes = vec!["C1".to_string(), "C2".to_string()];
    let ctx = CvContext::build(&m, &strata, 3, FeatureSource::Fixed(&codes), 0).unwrap();
    let eval = EvaluationConfig { folds: 3, ..Default::default() };
    assert!(benchmark_report(&ctx, &BTreeMap::new(), &eval).is_err());
}

#[test]
fn reconstructed_operating_point() {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10_000 {
        scores.push(if i < 6889 { 0.9 } else { 0.1 });
        labels.push(true);
        scores.push(if i < 8240 { 0.2 } else { 0.5 });
        labels.push(false);
    }
    let m = threshold_metrics(&scores, &labels, DEFAULT_THRESHOLD).unwrap();
    assert_eq!((m.tp, m.fn_, m.tn, m.fp), (6889, 3111, 8240, 1760));
    assert_abs_diff_eq!(m.sensitivity, 0.6889, epsilon = 1e-12);
    assert_abs_diff_eq!(m.specificity, 0.8240, epsilon = 1e-12);

    let ones = threshold_metrics(&[1.0; 4], &[true, false, true, false], 0.5).unwrap();
    assert_eq!((ones.sensitivity, ones.specificity), (1.0, 0.0));
}

#[test]
fn ten_and_ten_in_ten_folds() {
    let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
    let folds = stratified_kfold(&labels, 10, 4).unwrap();
    for f in 0..10 {
        let pos = (0..20).filter(|&i| folds[i] == f && labels[i]).count();
        let neg = (0..20).filter(|&i| folds[i] == f && !labels[i]).count();
        assert_eq!((pos, neg), (1, 1));
    }
}

#[test]
fn equal_aucs_total_to_themselves() {
    let shares = [0.1, 0.2, 0.3, 0.4];
    assert_abs_diff_eq!(weighted_total(&[0.7; 4], &shares).unwrap(), 0.7, epsilon = 1e-12);
}
