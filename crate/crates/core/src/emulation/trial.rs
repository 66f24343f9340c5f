//! Cohort construction and single-trial emulation.

use super::corpus::{ClaimsDb, ClaimsPatient, DrugCatalog, FOLLOW_UP_DAYS, ONSET_CODE, OUTCOME_CODE};
use crate::encoder::VisitSequence;
use crate::error::{Result, StedrError};
use crate::metrics::{smd_balance, weighted_auc, BalanceReport};
use crate::model::{estimate_effects, train, IptwMode, OutcomeKind, TrainConfig, TrainedModel, TrainingData};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Stream offset for control sampling.
const CONTROL_STREAM: u64 = 0xc0de_0001;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EligibilityCriteria {
    /// Age at condition onset must be strictly greater than this.
    pub min_onset_age: f64,
    /// Days between the first recorded visit and the index date.
    pub min_history_days: i64,
    pub min_cases: usize,
    /// Controls per case, at most.
    pub control_ratio: usize,
}

impl Default for EligibilityCriteria {
    fn default() -> Self {
        Self {
            min_onset_age: 50.0,
            min_history_days: 365,
            min_cases: 100,
            control_ratio: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Random,
    SameClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub drug: usize,
    pub trial_index: usize,
    pub control_mode: ControlMode,
    pub seed: u64,
}

/// A patient enrolled in a trial with their index date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    /// Position in `ClaimsDb::patients`.
    pub row: usize,
    pub id: usize,
    pub index_day: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCohort {
    pub spec: TrialSpec,
    pub cases: Vec<Enrollment>,
    pub controls: Vec<Enrollment>,
}

/// Whether a patient qualifies at `index_day`.
pub fn eligible_at(patient: &ClaimsPatient, index_day: i64, criteria: &EligibilityCriteria) -> bool {
    let Some(first) = patient.visits.first() else {
        return false;
    };
    if index_day - first.day < criteria.min_history_days {
        return false;
    }
    let prior = || patient.visits.iter().take_while(|v| v.day < index_day);
    if patient.visits.iter().take_while(|v| v.day <= index_day).any(|v| v.codes.contains(&OUTCOME_CODE)) {
        return false;
    }
    let Some(onset) = prior().find(|v| v.codes.contains(&ONSET_CODE)) else {
        return false;
    };
    let onset_age = f64::from(patient.age_at_first_code) + (onset.day - first.day) as f64 / DAYS_PER_YEAR;
    onset_age > criteria.min_onset_age
}

/// Eligible patients whose first prescription of `drug` is a valid index date.
pub fn eligible_cases(db: &ClaimsDb, drug: usize, criteria: &EligibilityCriteria) -> Vec<Enrollment> {
    db.patients
        .iter()
        .enumerate()
        .filter_map(|(row, p)| {
            let day = p.first_prescription(drug)?;
            eligible_at(p, day, criteria).then_some(Enrollment {
                row,
                id: p.id,
                index_day: day,
            })
        })
        .collect()
}

/// Builds the case cohort and samples controls.
///
/// A control has never been prescribed the trial drug; its index date is the
/// first prescription of any drug in the control pool (every other drug, or
/// the trial drug's class mates), and it must qualify at that date.
pub fn build_trial(
    db: &ClaimsDb,
    catalog: &DrugCatalog,
    spec: TrialSpec,
    criteria: &EligibilityCriteria,
) -> Result<TrialCohort> {
    let ineligible = |reason: String| StedrError::IneligibleDrug {
        drug: spec.drug,
        reason,
    };
    if spec.drug >= catalog.len() {
        return Err(StedrError::InvalidArgument(format!("drug {} is not in the catalog", spec.drug)));
    }
    let cases = eligible_cases(db, spec.drug, criteria);
    if cases.len() < criteria.min_cases {
        return Err(ineligible(format!("{} eligible cases, need {}", cases.len(), criteria.min_cases)));
    }
    let pool: Vec<bool> = match spec.control_mode {
        ControlMode::Random => (0..catalog.len()).map(|d| d != spec.drug).collect(),
        ControlMode::SameClass => {
            let mates = catalog.same_class(spec.drug);
            (0..catalog.len()).map(|d| mates.contains(&d)).collect()
        }
    };
    let mut candidates: Vec<Enrollment> = db
        .patients
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.ever_prescribed(spec.drug))
        .filter_map(|(row, p)| {
            let day = p
                .prescriptions
                .iter()
                .filter(|rx| pool.get(rx.drug).copied().unwrap_or(false))
                .map(|rx| rx.day)
                .min()?;
            eligible_at(p, day, criteria).then_some(Enrollment {
                row,
                id: p.id,
                index_day: day,
            })
        })
        .collect();
    if candidates.is_empty() {
        return Err(ineligible(format!("no eligible controls in {:?} mode", spec.control_mode)));
    }
    let cap = criteria.control_ratio * cases.len();
    if candidates.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ CONTROL_STREAM);
        candidates.shuffle(&mut rng);
        candidates.truncate(cap);
        candidates.sort_by_key(|e| e.row);
    }
    Ok(TrialCohort {
        spec,
        cases,
        controls: candidates,
    })
}

/// Baseline history before `index_day` as a model input.
pub fn baseline_sequence(patient: &ClaimsPatient, index_day: i64, n_codes: usize) -> VisitSequence {
    let visits: Vec<(Vec<usize>, f64)> = patient
        .visits
        .iter()
        .take_while(|v| v.day < index_day)
        .map(|v| (v.codes.clone(), (index_day - v.day) as f64))
        .collect();
    VisitSequence::from_code_sets(n_codes, &visits)
}

/// Number of baseline visits carrying each code.
pub fn baseline_counts(patient: &ClaimsPatient, index_day: i64, n_codes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_codes];
    for v in patient.visits.iter().take_while(|v| v.day < index_day) {
        for &c in &v.codes {
            counts[c] += 1.0;
        }
    }
    counts
}

/// Outcome code recorded within the follow-up window.
pub fn observed_outcome(patient: &ClaimsPatient, index_day: i64) -> u8 {
    u8::from(
        patient
            .visits
            .iter()
            .any(|v| v.day > index_day && v.day <= index_day + FOLLOW_UP_DAYS && v.codes.contains(&OUTCOME_CODE)),
    )
}

impl TrialCohort {
    /// Cases first, then controls.
    pub fn members(&self) -> impl Iterator<Item = (&Enrollment, u8)> {
        self.cases.iter().map(|e| (e, 1)).chain(self.controls.iter().map(|e| (e, 0)))
    }

    pub fn training_data(&self, db: &ClaimsDb) -> Result<TrainingData> {
        let mut seqs = Vec::new();
        let mut treatment = Vec::new();
        let mut outcome = Vec::new();
        for (e, t) in self.members() {
            let p = &db.patients[e.row];
            seqs.push(baseline_sequence(p, e.index_day, db.n_codes));
            treatment.push(t);
            outcome.push(f64::from(observed_outcome(p, e.index_day)));
        }
        TrainingData::new(seqs, treatment, outcome)
    }

    pub fn covariate_counts(&self, db: &ClaimsDb) -> Vec<Vec<f64>> {
        self.members()
            .map(|(e, _)| baseline_counts(&db.patients[e.row], e.index_day, db.n_codes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub case_ids: Vec<usize>,
    pub control_ids: Vec<usize>,
    /// Mean estimated effect per model subgroup on the test split; `None`
    /// when no test patient was assigned to it.
    pub subgroup_ate: Vec<Option<f64>>,
    pub subgroup_sizes: Vec<usize>,
    pub overall_ate: f64,
    /// 95% interval for the overall effect from the augmented inverse
    /// propensity influence function on the test split.
    pub overall_ci: (f64, f64),
    /// Mean baseline code counts per model subgroup over the whole cohort,
    /// used to align subgroups across trials.
    pub subgroup_centroids: Vec<Option<Vec<f64>>>,
    pub balance: BalanceReport,
    pub checkpoint_digest: String,
}

impl TrialResult {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("results serialize")))
    }
}

/// Trains on one cohort and summarizes effects and balance. Returns the model
/// with the result.
pub fn emulate_trial(
    db: &ClaimsDb,
    cohort: &TrialCohort,
    config: &TrainConfig,
) -> Result<(TrialResult, TrainedModel)> {
    if cohort.cases.is_empty() || cohort.controls.is_empty() {
        return Err(StedrError::PositivityViolation("trial needs cases and controls".into()));
    }
    let config = TrainConfig {
        seed: cohort.spec.seed,
        outcome_kind: OutcomeKind::Binary,
        ..config.clone()
    };
    let data = cohort.training_data(db)?;
    let model = train(&config, &data)?;
    let estimates = estimate_effects(&model, &data.seqs)?;
    let k = config.effective_k();

    let mut sums = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for &i in &model.split.test {
        let e = &estimates[i];
        sums[e.subgroup] += e.tau_hat;
        sizes[e.subgroup] += 1;
    }
    let n_test: usize = sizes.iter().sum();
    if n_test == 0 {
        return Err(StedrError::InvalidArgument("trial has an empty test split".into()));
    }
    let overall_ate = sums.iter().sum::<f64>() / n_test as f64;
    let influence: Vec<f64> = model
        .split
        .test
        .iter()
        .map(|&i| {
            let (e, y) = (&estimates[i], data.outcome[i]);
            if data.treatment[i] == 1 {
                e.tau_hat + (y - e.y1_hat) / e.t_hat
            } else {
                e.tau_hat - (y - e.y0_hat) / (1.0 - e.t_hat)
            }
        })
        .collect();
    let psi_mean = influence.iter().sum::<f64>() / n_test as f64;
    let psi_var = influence.iter().map(|v| (v - psi_mean).powi(2)).sum::<f64>() / (n_test.max(2) - 1) as f64;
    let half = crate::metrics::Z95 * (psi_var / n_test as f64).sqrt();
    let overall_ci = (overall_ate - half, overall_ate + half);
    let subgroup_ate = (0..k).map(|g| (sizes[g] > 0).then(|| sums[g] / sizes[g] as f64)).collect();

    let counts = cohort.covariate_counts(db);
    let m = db.n_codes;
    let mut centroid_sums = vec![vec![0.0; m]; k];
    let mut members = vec![0usize; k];
    for (row, e) in counts.iter().zip(&estimates) {
        members[e.subgroup] += 1;
        for (acc, v) in centroid_sums[e.subgroup].iter_mut().zip(row) {
            *acc += v;
        }
    }
    let subgroup_centroids = centroid_sums
        .into_iter()
        .zip(&members)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();

    // Balance after weighting each arm by its own inverse propensity.
    let t_hat: Vec<f64> = estimates.iter().map(|e| e.t_hat).collect();
    let weights = crate::model::iptw_weights(
        &t_hat,
        &data.treatment,
        model.pr_t,
        IptwMode::TreatmentConditional,
        config.propensity_clip,
    )?;
    let n_case = cohort.cases.len();
    let smd = smd_balance(
        &counts[..n_case],
        &counts[n_case..],
        Some((&weights[..n_case], &weights[n_case..])),
    )?;
    let auc = weighted_auc(&data.treatment, &t_hat, &weights)?;

    let result = TrialResult {
        spec: cohort.spec,
        case_ids: cohort.cases.iter().map(|e| e.id).collect(),
        control_ids: cohort.controls.iter().map(|e| e.id).collect(),
        subgroup_ate,
        subgroup_sizes: sizes,
        overall_ate,
        overall_ci,
        subgroup_centroids,
        balance: BalanceReport::new(smd, auc),
        checkpoint_digest: model.digest()?,
    };
    Ok((result, model))
}
