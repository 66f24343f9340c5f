use stedr::emulation::{
    build_trial, emulate_trial, generate_claims, oracle_subgroup_effects, trial_spec, ClaimsConfig, ScreenConfig,
};
use stedr::model::TrainConfig;

fn large(effects: &[f64]) -> ClaimsConfig {
    ClaimsConfig {
        n_patients: 50_000,
        seed: 11,
        ..ClaimsConfig::default()
    }
    .with_uniform_effects(effects)
}

#[test]
fn oracle_subgroup_effects_recover_configuration() {
    let effects = [-0.1, 0.0, 0.05];
    let corpus = generate_claims(&large(&effects)).unwrap();
    let recovered = oracle_subgroup_effects(&corpus, None);
    for (got, want) in recovered.iter().zip(effects) {
        let got = got.unwrap();
        assert!((got - want).abs() <= 0.01, "{got} vs {want}");
    }
}

#[test]
fn null_effects_give_null_oracle_ate() {
    let corpus = generate_claims(&large(&[0.0, 0.0, 0.0])).unwrap();
    let n = corpus.oracle.len() as f64;
    let ate: f64 = corpus
        .oracle
        .iter()
        .map(|o| f64::from(o.outcome_treated) - f64::from(o.outcome_untreated))
        .sum::<f64>()
        / n;
    assert!(ate.abs() <= 0.01);
}

#[test]
fn emulated_trial_is_deterministic() {
    let corpus = generate_claims(&ClaimsConfig {
        n_patients: 5000,
        ..ClaimsConfig::default()
    })
    .unwrap();
    let config = ScreenConfig {
        n_trials: 4,
        train: TrainConfig {
            max_epochs: 3,
            ..stedr::emulation::trial_train_config()
        },
        ..ScreenConfig::default()
    };
    let spec = trial_spec(&config, 0, 1);
    let cohort = build_trial(&corpus.db, &corpus.catalog, spec, &config.criteria).unwrap();
    let (a, _) = emulate_trial(&corpus.db, &cohort, &config.train).unwrap();
    let (b, _) = emulate_trial(&corpus.db, &cohort, &config.train).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a, b);
}

/// The planted-null drug's own interval covers zero in most seeded trials.
#[test]
fn null_drug_intervals_cover_zero() {
    let corpus = generate_claims(&ClaimsConfig::default()).unwrap();
    let null_drug = 2;
    assert!(corpus.config.planted.iter().any(|p| p.drug == null_drug && p.effects.iter().all(|&e| e == 0.0)));
    let config = ScreenConfig {
        n_trials: 20,
        ..ScreenConfig::default()
    };
    let mut covered = 0;
    for i in 0..config.n_trials {
        let cohort = build_trial(&corpus.db, &corpus.catalog, trial_spec(&config, null_drug, i), &config.criteria).unwrap();
        let (r, _) = emulate_trial(&corpus.db, &cohort, &config.train).unwrap();
        assert!(r.overall_ci.0 <= r.overall_ate && r.overall_ate <= r.overall_ci.1);
        if r.overall_ci.0 <= 0.0 && 0.0 <= r.overall_ci.1 {
            covered += 1;
        }
    }
    assert!(covered >= 18, "zero covered in {covered} of 20 trials");
}
