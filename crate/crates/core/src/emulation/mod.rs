//! Trial emulation on a synthetic claims corpus: cohort construction,
//! per-trial effect estimation, drug screening and attention summaries.

mod attention;
mod corpus;
mod screen;
mod trial;

pub use attention::{attention_summary, normalize_rows, write_attention_csv, AttentionTable};
pub use corpus::{
    generate_claims, oracle_path, oracle_subgroup_effects, read_corpus, write_corpus, ClaimsConfig, ClaimsCorpus,
    ClaimsDb, ClaimsPatient, DrugCatalog, PatientOracle, PlantedEffect, Prescription, Sex, Visit, FOLLOW_UP_DAYS,
    ONSET_CODE, OUTCOME_CODE, RISK_HIGH, RISK_LOW,
};
pub use screen::{
    align_subgroups, run_screen, trial_seed, trial_spec, trial_train_config, write_report_csv, write_report_json,
    DrugReport, EffectSummary, ScreenConfig, ScreenReport, Verdict, SIGNIFICANCE,
};
pub use trial::{
    baseline_counts, baseline_sequence, build_trial, eligible_at, eligible_cases, emulate_trial, observed_outcome,
    ControlMode, EligibilityCriteria, Enrollment, TrialCohort, TrialResult, TrialSpec,
};
