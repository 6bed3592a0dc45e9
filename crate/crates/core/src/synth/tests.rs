use super::*;
use crate::cohort::{phenotype, PhenotypeConfig};
use crate::evaluate::assign_stratum;

fn small(n: usize, seed: u64) -> SynthConfig {
    let dict = [150, 200, 150];
    SynthConfig {
        n_participants: n,
        n_concepts_per_domain: dict,
        planted_signals: stratified_signals(dict, 2, 0.5, 0.1),
        visits_per_year: 2.0,
        seed,
        ..SynthConfig::default()
    }
}

fn phenotype_config(config: &SynthConfig) -> PhenotypeConfig {
    PhenotypeConfig {
        crs_code_set: config.crs_code_set.iter().cloned().collect(),
        ..PhenotypeConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&small(300, 7)).unwrap().write(a.path()).unwrap();
    generate(&small(300, 7)).unwrap().write(b.path()).unwrap();
    for f in ["participants.csv", "events.csv", "ground_truth.csv", "planted_concepts.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    generate(&small(300, 8)).unwrap().write(c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("events.csv")).unwrap(),
        std::fs::read(c.path().join("events.csv")).unwrap()
    );
}

#[test]
fn zero_target_fraction_has_no_phenotype_targets() {
    let config = SynthConfig {
        target_fraction: 0.0,
        isolated_crs_rate: 0.5,
        ..small(2000, 1)
    };
    let synth = generate(&config).unwrap();
    assert!(synth.truth.labels.iter().all(|(_, l)| !l));
    assert!(phenotype(&synth.store, &phenotype_config(&config)).unwrap().is_empty());
}

#[test]
fn phenotype_recovers_true_labels() {
    let config = small(5000, 3);
    let synth = generate(&config).unwrap();
    let targets: HashSet<PersonId> = phenotype(&synth.store, &phenotype_config(&config))
        .unwrap()
        .into_iter()
        .map(|t| t.person_id)
        .collect();
    let agree = synth
        .truth
        .labels
        .iter()
        .filter(|(id, l)| targets.contains(id) == *l)
        .count();
    assert!(agree as f64 / 5000.0 >= 0.99, "agreement {agree}/5000");
}

#[test]
fn planted_prevalence_difference_concentrates() {
    let dict = [100, 100, 100];
    let config = SynthConfig {
        n_participants: 20_000,
        n_concepts_per_domain: dict,
        planted_signals: shared_signals(dict, 1, 0.30, 0.10),
        visits_per_year: 0.5,
        target_fraction: 0.5,
        stratum_target_weights: [1.0; 6],
        seed: 11,
        ..SynthConfig::default()
    };
    let synth = generate(&config).unwrap();
    let code = &config.planted_signals[0].concept_code;
    let cid = synth.store.concept_id(code).unwrap();
    let (mut carriers, mut totals) = ([0usize; 2], [0usize; 2]);
    for (id, label) in &synth.truth.labels {
        let g = usize::from(*label);
        totals[g] += 1;
        if synth.store.events(*id).unwrap().iter().any(|e| e.concept == cid) {
            carriers[g] += 1;
        }
    }
    let diff = carriers[1] as f64 / totals[1] as f64 - carriers[0] as f64 / totals[0] as f64;
    assert!((diff - 0.20).abs() <= 0.02, "difference {diff}");
}

#[test]
fn strata_proportions_are_reproduced() {
    let mut config = small(12_000, 5);
    config.strata_proportions = [0.1, 0.15, 0.2, 0.1, 0.15, 0.2];
    let synth = generate(&config).unwrap();
    let mut counts = [0usize; 7];
    for s in &synth.truth.strata {
        counts[s.map_or(6, Stratum::index)] += 1;
    }
    for (k, want) in config.strata_proportions.iter().chain(&[0.1]).enumerate() {
        let got = counts[k] as f64 / 12_000.0;
        assert!((got - want).abs() <= 0.01, "stratum {k}: {got} vs {want}");
    }
}

#[test]
fn target_strata_match_index_date_assignment() {
    let config = small(3000, 9);
    let synth = generate(&config).unwrap();
    let targets = phenotype(&synth.store, &phenotype_config(&config)).unwrap();
    let by_id: BTreeMap<PersonId, Option<Stratum>> = synth
        .truth
        .labels
        .iter()
        .zip(&synth.truth.strata)
        .map(|((id, _), s)| (*id, *s))
        .collect();
    for t in targets {
        let p = synth.store.participant(t.person_id).unwrap();
        assert_eq!(assign_stratum(p, t.index_date), by_id[&t.person_id]);
    }
}

#[test]
fn planted_concepts_come_from_the_dictionary() {
    let mut config = small(10, 1);
    assert!(config.validate().is_ok());
    config.planted_signals[0].concept_code = "C99999".into();
    assert!(matches!(generate(&config), Err(Error::InfeasibleConfig(_))));

    let mut config = small(10, 1);
    config.planted_signals[0].control_prevalence = config.planted_signals[0].target_prevalence;
    assert!(config.validate().is_err());

    let mut config = small(10, 1);
    config.strata_proportions = [0.3; 6];
    assert!(config.validate().is_err());

    let dict = [2, 2, 2];
    let config = SynthConfig {
        n_concepts_per_domain: dict,
        planted_signals: shared_signals(dict, 6, 0.5, 0.1),
        ..small(10, 1)
    };
    assert!(matches!(config.validate(), Err(Error::InfeasibleConfig(_))));
}

#[test]
fn default_config_plants_sixty_concepts() {
    let config = SynthConfig::default();
    config.validate().unwrap();
    assert_eq!(config.planted_signals.len(), 60);
    let codes: HashSet<_> = config.planted_signals.iter().map(|s| &s.concept_code).collect();
    assert_eq!(codes.len(), 60);
    for s in Stratum::ALL {
        assert_eq!(config.planted_signals.iter().filter(|p| p.stratum == Some(s)).count(), 10);
    }
    let total: f64 = TABLE_I_SHARES.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn ground_truth_files_round_trip() {
    let synth = generate(&small(50, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth.write(dir.path()).unwrap();
    let planted = GroundTruth::read_planted(&dir.path().join("planted_concepts.csv")).unwrap();
    assert_eq!(planted, synth.truth.planted);
    let store = crate::ehr::load_store(&dir.path().join("participants.csv"), &dir.path().join("events.csv")).unwrap();
    assert_eq!(store.n_events(), synth.store.n_events());
}
