use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ehr::PersonId;
use crate::evaluate::AgeBin;
use crate::featurize::FeatureColumn;

/// `present[j]` lists the rows carrying concept j (recency 1).
fn matrix(labels: &[bool], domains: &[(&str, Domain)], present: &[Vec<u32>]) -> RecencyFeatureMatrix {
    RecencyFeatureMatrix::new(
        (0..labels.len() as u64).map(PersonId).collect(),
        domains
            .iter()
            .map(|(c, d)| FeatureColumn {
                concept_code: c.to_string(),
                domain: *d,
            })
            .collect(),
        present.iter().map(|rows| rows.iter().map(|&r| (r, 1)).collect()).collect(),
        labels.to_vec(),
        730,
    )
    .unwrap()
}

fn labels_10_10() -> Vec<bool> {
    (0..20).map(|i| i < 10).collect()
}

#[test]
fn prevalence_score_is_absolute_difference() {
    // 6 of 10 targets, 2 of 10 controls
    let m = matrix(
        &labels_10_10(),
        &[("A", Domain::Condition), ("B", Domain::Condition)],
        &[vec![0, 1, 2, 3, 4, 5, 10, 11], vec![0, 1, 10, 11]],
    );
    let s = prevalence_scores(&m).unwrap();
    assert_abs_diff_eq!(s[0].score, 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(s[0].p_target, 0.6, epsilon = 1e-15);
    assert_eq!(s[1].score, 0.0);

    let sel = stage1_prevalence(&m, &QuotaConfig::default()).unwrap();
    assert_eq!(sel.codes(), vec!["A", "B"]);
}

#[test]
fn stage1_quotas_and_tie_breaks() {
    let labels = labels_10_10();
    // C1 and C2 tie on score 0.2; C2 has the higher target prevalence.
    // C3 and C4 tie on both; the smaller code wins.
    let m = matrix(
        &labels,
        &[
            ("C1", Domain::Condition),
            ("C2", Domain::Condition),
            ("C4", Domain::Condition),
            ("C3", Domain::Condition),
            ("P1", Domain::Procedure),
            ("M1", Domain::Medication),
        ],
        &[
            vec![0, 1, 10, 11, 12, 13],
            vec![0, 1, 2, 3, 4, 5, 10, 11, 12, 13],
            vec![0],
            vec![0],
            vec![0, 1],
            vec![10],
        ],
    );
    let quotas = QuotaConfig {
        conditions: 3,
        procedures: 5,
        medications: 0,
    };
    let sel = stage1_prevalence(&m, &quotas).unwrap();
    let codes = sel.codes();
    assert_eq!(codes, vec!["C2", "C1", "P1", "C3"]);
    assert!(sel.features.iter().all(|f| f.stage == Stage::Stage1));
}

#[test]
fn prevalence_needs_both_classes() {
    let m = matrix(&[true, true], &[("A", Domain::Condition)], &[vec![0]]);
    assert!(matches!(prevalence_scores(&m), Err(Error::SingleClass(_))));
}

proptest! {
    #[test]
    fn prevalence_symmetric_and_permutation_invariant(
        cells in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 1..6),
        seed in any::<u64>(),
    ) {
        let labels: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let names: Vec<(String, Domain)> = (0..cells.len()).map(|j| (format!("X{j}"), Domain::Procedure)).collect();
        let domains: Vec<(&str, Domain)> = names.iter().map(|(c, d)| (c.as_str(), *d)).collect();
        let present: Vec<Vec<u32>> = cells.iter().map(|c| (0..12u32).filter(|&r| c[r as usize]).collect()).collect();
        let base = prevalence_scores(&matrix(&labels, &domains, &present)).unwrap();

        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let swapped = prevalence_scores(&matrix(&flipped, &domains, &present)).unwrap();
        for (a, b) in base.iter().zip(&swapped) {
            prop_assert_eq!(a.score, b.score);
        }

        let mut perm: Vec<u32> = (0..12).collect();
        perm.sort_by_key(|&r| crate::rng::mix64(seed ^ r as u64));
        let labels_p: Vec<bool> = (0..12).map(|i| labels[perm[i] as usize]).collect();
        let inv: Vec<u32> = {
            let mut inv = vec![0u32; 12];
            for (i, &r) in perm.iter().enumerate() {
                inv[r as usize] = i as u32;
            }
            inv
        };
        let present_p: Vec<Vec<u32>> = present.iter().map(|rows| rows.iter().map(|&r| inv[r as usize]).collect()).collect();
        let permuted = prevalence_scores(&matrix(&labels_p, &domains, &present_p)).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert_eq!(a.score, b.score);
        }
    }
}

fn small_params(n_estimators: usize) -> GbdtParams {
    GbdtParams {
        n_estimators,
        max_depth: 2,
        learning_rate: 0.3,
        ..GbdtParams::default()
    }
}

#[test]
fn stage2_single_feature_model() {
    let labels = labels_10_10();
    // only A separates the classes; B is constant presence
    let m = matrix(
        &labels,
        &[("A", Domain::Condition), ("B", Domain::Procedure)],
        &[(0..10).collect(), (0..20).collect()],
    );
    let (sel, model) = stage2_gain(&m, &small_params(5), 1).unwrap();
    assert_eq!(sel.codes(), vec!["A"]);
    assert_eq!(sel.features[0].stage, Stage::Stage2);
    let gains = model.gain_importance();
    assert!(gains[0] > 0.0);
    assert_eq!(gains[1], 0.0);

    let (sel_all, _) = stage2_gain(&m, &small_params(5), 10).unwrap();
    assert_eq!(sel_all.codes(), vec!["A"], "unused feature is not retained");

    let ds = m.to_dataset();
    let coverage = |codes: &[&str]| {
        let set = SelectedFeatureSet {
            features: codes
                .iter()
                .map(|c| SelectedFeature {
                    concept_code: c.to_string(),
                    domain: Domain::Condition,
                    stage: Stage::Stage2,
                    score: 0.0,
                })
                .collect(),
        };
        shap_coverage(&model, &ds, &set, AttributionMode::Path).unwrap()
    };
    assert_eq!(coverage(&["A", "B"]), 1.0);
    assert_eq!(coverage(&[]), 0.0);
    assert_abs_diff_eq!(coverage(&["A"]), 1.0, epsilon = 1e-12);
}

#[test]
fn coverage_is_monotone_and_modes_agree_on_totals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<bool> = (0..200).map(|_| rng.random()).collect();
    let names: Vec<(String, Domain)> = (0..6).map(|j| (format!("F{j}"), Domain::Medication)).collect();
    let domains: Vec<(&str, Domain)> = names.iter().map(|(c, d)| (c.as_str(), *d)).collect();
    let present: Vec<Vec<u32>> = (0..6)
        .map(|j| {
            (0..200u32)
                .filter(|&r| rng.random::<f64>() < if labels[r as usize] { 0.3 + 0.08 * j as f64 } else { 0.3 })
                .collect()
        })
        .collect();
    let m = matrix(&labels, &domains, &present);
    let model = train(&m.to_dataset(), m.labels(), &small_params(20)).unwrap();
    let ds = m.to_dataset();
    let set = |k: usize| SelectedFeatureSet {
        features: (0..k)
            .map(|j| SelectedFeature {
                concept_code: format!("F{j}"),
                domain: Domain::Medication,
                stage: Stage::Stage2,
                score: 0.0,
            })
            .collect(),
    };
    let mut last = 0.0;
    for k in 0..=6 {
        let c = shap_coverage(&model, &ds, &set(k), AttributionMode::Path).unwrap();
        assert!(c >= last - 1e-15 && c <= 1.0);
        last = c;
    }
    assert_abs_diff_eq!(last, 1.0, epsilon = 1e-12);
    let c = shap_coverage(&model, &ds, &set(6), AttributionMode::Interventional { background: 20 }).unwrap();
    assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
}

#[test]
fn kruskal_wallis_hand_examples() {
    let (h, p) = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    assert_abs_diff_eq!(h, 27.0 / 7.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p, statrs::function::erf::erfc((h / 2.0).sqrt()), epsilon = 1e-10);

    let (h, p) = kruskal_wallis(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert_abs_diff_eq!(h, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);

    assert_eq!(kruskal_wallis(&[vec![3.0, 3.0], vec![3.0]]).unwrap(), (0.0, 1.0));
    assert!(kruskal_wallis(&[vec![1.0]]).is_err());
    assert!(kruskal_wallis(&[vec![1.0], vec![]]).is_err());
}

/// Tie-corrected H written as a between/within ratio of rank variance.
fn h_oracle(groups: &[Vec<f64>]) -> f64 {
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len();
    let rank = |v: f64| {
        let below = pooled.iter().filter(|&&x| x < v).count() as f64;
        let equal = pooled.iter().filter(|&&x| x == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let mean = (n as f64 + 1.0) / 2.0;
    let mut between = 0.0;
    let mut total = 0.0;
    for g in groups {
        let ranks: Vec<f64> = g.iter().map(|&v| rank(v)).collect();
        let gm = ranks.iter().sum::<f64>() / ranks.len() as f64;
        between += ranks.len() as f64 * (gm - mean).powi(2);
        total += ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
    }
    if total == 0.0 {
        0.0
    } else {
        (n as f64 - 1.0) * between / total
    }
}

proptest! {
    #[test]
    fn kruskal_wallis_matches_variance_form(
        groups in prop::collection::vec(prop::collection::vec(0u8..6, 1..9), 2..5),
    ) {
        let groups: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|&v| v as f64).collect()).collect();
        let (h, p) = kruskal_wallis(&groups).unwrap();
        prop_assert!((h - h_oracle(&groups)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&p));
        // strictly increasing transform leaves ranks unchanged
        let transformed: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| (v * 0.7).exp() - 3.0).collect()).collect();
        prop_assert!((kruskal_wallis(&transformed).unwrap().0 - h).abs() < 1e-9);
    }
}

#[test]
fn chi_square_survival_closed_forms() {
    for x in [0.1, 1.0, 3.5, 10.0] {
        // two degrees of freedom: exp(-x/2)
        assert_abs_diff_eq!(chi_square_sf(x, 2.0), (-x / 2.0).exp(), epsilon = 1e-14);
    }
    assert_eq!(chi_square_sf(0.0, 3.0), 1.0);
    assert_eq!(chi_square_sf(f64::INFINITY, 3.0), 0.0);
}

#[test]
fn two_proportion_examples() {
    let (diff, p) = compare_prevalence(30, 100, 10, 100).unwrap();
    assert_abs_diff_eq!(diff, 0.2, epsilon = 1e-15);
    let z = 0.2 / (0.2f64 * 0.8 * (2.0 / 100.0)).sqrt();
    assert_abs_diff_eq!(z, 3.5355, epsilon = 1e-4);
    assert_abs_diff_eq!(p, statrs::function::erf::erfc(z / 2f64.sqrt()), epsilon = 1e-10);
    assert!((p - 4.07e-4).abs() < 1e-5);

    let (diff, p) = compare_prevalence(7, 50, 14, 100).unwrap();
    assert_eq!(diff, 0.0);
    assert_eq!(p, 1.0);

    // 4.73% of 1,184 against 2.20% of 16,376
    let (k1, k2) = ((0.0473f64 * 1184.0).round() as u64, (0.0220f64 * 16376.0).round() as u64);
    let (diff, p) = compare_prevalence(k1, 1184, k2, 16376).unwrap();
    assert!(diff > 0.0 && p < 0.001, "diff {diff}, p {p}");

    assert!(compare_prevalence(1, 0, 1, 2).is_err());
    assert!(compare_prevalence(3, 2, 1, 2).is_err());
}

fn strata_cycle(n: usize) -> Vec<Option<Stratum>> {
    (0..n).map(|i| Some(Stratum::ALL[i % 6])).collect()
}

#[test]
fn count_significant_cases() {
    let n = 600;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    // constant columns: every row present with the same value, or nobody
    let constant = matrix(
        &labels,
        &[("A", Domain::Condition), ("B", Domain::Condition)],
        &[(0..n as u32).collect(), vec![]],
    );
    assert_eq!(count_significant(&constant, &strata_cycle(n), 0.05).unwrap().0, 0);

    // present only in the first stratum
    let hetero = matrix(
        &labels,
        &[("H", Domain::Condition), ("N", Domain::Condition)],
        &[
            (0..n as u32).filter(|r| r % 6 == 0).collect(),
            (0..n as u32).filter(|r| r % 5 == 0).collect(),
        ],
    );
    let (count, tests) = count_significant(&hetero, &strata_cycle(n), 0.05).unwrap();
    assert!(count >= 1);
    assert!(tests[0].p < 1e-10);
    assert!(tests[1].p > 0.05);

    // a stratum with one member is dropped from the test
    let mut strata = strata_cycle(n);
    for s in strata.iter_mut().skip(1) {
        if *s == Some(Stratum::ALL[0]) {
            *s = None;
        }
    }
    let (_, tests) = count_significant(&hetero, &strata, 0.05).unwrap();
    assert!(tests[0].p > 0.05, "only the singleton carried the concept");
    assert!(count_significant(&hetero, &strata[1..], 0.05).is_err());
    let _ = AgeBin::Young;
}

#[test]
fn selected_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("selected_features.csv");
    let s1 = SelectedFeatureSet {
        features: vec![
            SelectedFeature {
                concept_code: "C1".into(),
                domain: Domain::Condition,
                stage: Stage::Stage1,
                score: 0.25,
            },
            SelectedFeature {
                concept_code: "P9".into(),
                domain: Domain::Procedure,
                stage: Stage::Stage1,
                score: 0.125,
            },
        ],
    };
    let s2 = SelectedFeatureSet {
        features: vec![SelectedFeature {
            concept_code: "P9".into(),
            domain: Domain::Procedure,
            stage: Stage::Stage2,
            score: 3.5,
        }],
    };
    write_selected(&path, &[&s1, &s2]).unwrap();
    assert_eq!(read_selected(&path, Stage::Stage1).unwrap(), s1);
    assert_eq!(read_selected(&path, Stage::Stage2).unwrap(), s2);
}
