//! Synthetic claims corpus with planted, subgroup-specific drug effects.

use crate::data::meta_path;
use crate::error::{invalid, Result, StedrError};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Code marking onset of the qualifying condition.
pub const ONSET_CODE: usize = 0;
/// Code marking the outcome event.
pub const OUTCOME_CODE: usize = 1;
/// Follow-up window after the index date.
pub const FOLLOW_UP_DAYS: i64 = 730;
/// Codes reserved for onset and outcome.
const RESERVED_CODES: usize = 2;
/// Untreated outcome risk stays inside `[RISK_LOW, RISK_HIGH]`.
pub const RISK_LOW: f64 = 0.1;
pub const RISK_HIGH: f64 = 0.6;
/// Signature codes per latent subgroup and their prevalence boost.
const SIGNATURE_CODES: usize = 24;
const SIGNATURE_BOOST: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub day: i64,
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescription {
    pub day: i64,
    pub drug: usize,
}

/// Model-visible record of one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsPatient {
    pub id: usize,
    pub age_at_first_code: u32,
    pub sex: Sex,
    pub visits: Vec<Visit>,
    pub prescriptions: Vec<Prescription>,
}

impl ClaimsPatient {
    /// First prescription day of `drug`.
    pub fn first_prescription(&self, drug: usize) -> Option<i64> {
        self.prescriptions.iter().filter(|p| p.drug == drug).map(|p| p.day).min()
    }

    pub fn ever_prescribed(&self, drug: usize) -> bool {
        self.prescriptions.iter().any(|p| p.drug == drug)
    }
}

/// Ground truth kept apart from the model-visible data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientOracle {
    pub id: usize,
    pub latent_subgroup: usize,
    pub index_drug: usize,
    pub risk_untreated: f64,
    pub risk_treated: f64,
    pub outcome_untreated: u8,
    pub outcome_treated: u8,
}

impl PatientOracle {
    pub fn effect(&self) -> f64 {
        self.risk_treated - self.risk_untreated
    }
}

/// Drug id to class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugCatalog {
    pub classes: Vec<usize>,
}

impl DrugCatalog {
    /// `n_drugs` spread round-robin over `n_classes`.
    pub fn round_robin(n_drugs: usize, n_classes: usize) -> Self {
        Self {
            classes: (0..n_drugs).map(|d| d % n_classes.max(1)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, drug: usize) -> Option<usize> {
        self.classes.get(drug).copied()
    }

    pub fn same_class(&self, drug: usize) -> Vec<usize> {
        match self.class_of(drug) {
            Some(c) => (0..self.len()).filter(|&d| d != drug && self.classes[d] == c).collect(),
            None => Vec::new(),
        }
    }
}

/// Risk difference a drug causes in each latent subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub drug: usize,
    pub effects: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaimsConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_drugs: usize,
    pub n_classes: usize,
    /// Number of latent subgroups.
    pub k_true: usize,
    /// Latent subgroup prevalence; uniform when empty.
    pub prevalence: Vec<f64>,
    /// Drugs not listed here have no effect.
    pub planted: Vec<PlantedEffect>,
    /// Index-drug popularity decays as `1 / (rank + popularity_offset)`.
    pub popularity_offset: f64,
    /// Share of patients with an extra prescription early in their history.
    pub early_prescription_rate: f64,
    pub seed: u64,
}

impl Default for ClaimsConfig {
    fn default() -> Self {
        Self {
            n_patients: 20_000,
            n_codes: 286,
            n_drugs: 40,
            n_classes: 8,
            k_true: 3,
            prevalence: vec![0.25, 0.25, 0.5],
            planted: vec![
                PlantedEffect {
                    drug: 0,
                    effects: vec![-0.1, -0.05, -0.02],
                },
                PlantedEffect {
                    drug: 1,
                    effects: vec![-0.1, 0.0, 0.05],
                },
                PlantedEffect {
                    drug: 2,
                    effects: vec![0.0, 0.0, 0.0],
                },
            ],
            popularity_offset: 3.0,
            early_prescription_rate: 0.1,
            seed: 0,
        }
    }
}

impl ClaimsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StedrError::InvalidConfig(m));
        if self.k_true == 0 {
            return bad("k_true must be at least 1".into());
        }
        if self.n_codes < RESERVED_CODES + self.k_true * SIGNATURE_CODES {
            return bad(format!(
                "need at least {} codes",
                RESERVED_CODES + self.k_true * SIGNATURE_CODES
            ));
        }
        if self.n_drugs < 2 || self.n_classes == 0 || self.n_classes > self.n_drugs {
            return bad("need at least two drugs and 1..=n_drugs classes".into());
        }
        if !self.prevalence.is_empty()
            && (self.prevalence.len() != self.k_true
                || self.prevalence.iter().any(|p| !(*p >= 0.0))
                || (self.prevalence.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return bad("prevalence must hold k_true non-negative values summing to 1".into());
        }
        if !(self.popularity_offset > 0.0) || !(0.0..=1.0).contains(&self.early_prescription_rate) {
            return bad("popularity_offset must be positive and early_prescription_rate in [0, 1]".into());
        }
        let mut seen = BTreeSet::new();
        for p in &self.planted {
            if p.drug >= self.n_drugs || !seen.insert(p.drug) {
                return bad(format!("planted drug {} out of range or repeated", p.drug));
            }
            if p.effects.len() != self.k_true {
                return bad(format!("drug {} needs {} effects", p.drug, self.k_true));
            }
            for &e in &p.effects {
                if !e.is_finite() || RISK_LOW + e < 0.0 || RISK_HIGH + e > 1.0 {
                    return bad(format!(
                        "effect {e} of drug {} pushes risk outside [0, 1]",
                        p.drug
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every drug carries the same per-subgroup effects; subgroups are
    /// equally prevalent.
    pub fn with_uniform_effects(mut self, effects: &[f64]) -> Self {
        self.k_true = effects.len();
        self.prevalence = Vec::new();
        self.planted = (0..self.n_drugs)
            .map(|drug| PlantedEffect {
                drug,
                effects: effects.to_vec(),
            })
            .collect();
        self
    }

    fn prevalence(&self) -> Vec<f64> {
        if self.prevalence.is_empty() {
            vec![1.0 / self.k_true as f64; self.k_true]
        } else {
            self.prevalence.clone()
        }
    }

    fn effect(&self, drug: usize, subgroup: usize) -> f64 {
        self.planted
            .iter()
            .find(|p| p.drug == drug)
            .map_or(0.0, |p| p.effects[subgroup])
    }
}

/// Model-visible claims data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimsDb {
    pub n_codes: usize,
    pub patients: Vec<ClaimsPatient>,
}

impl ClaimsDb {
    /// SHA-256 over the canonical JSON of every patient.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.n_codes.to_le_bytes());
        for p in &self.patients {
            h.update(serde_json::to_vec(p).expect("patients serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimsCorpus {
    pub config: ClaimsConfig,
    pub db: ClaimsDb,
    pub catalog: DrugCatalog,
    pub oracle: Vec<PatientOracle>,
}

struct CodeProfiles {
    /// Per subgroup sampling weights over the non-reserved codes.
    weights: Vec<WeightedIndex<f64>>,
    /// Untreated outcome log-odds contribution per subgroup.
    risk_offset: Vec<f64>,
}

fn code_profiles(config: &ClaimsConfig, rng: &mut ChaCha8Rng) -> CodeProfiles {
    let free = config.n_codes - RESERVED_CODES;
    // Long-tailed background prevalence.
    let base: Vec<f64> = (0..free).map(|i| 1.0 / (1.0 + i as f64).powf(0.9)).collect();
    let mut order: Vec<usize> = (0..free).collect();
    order.shuffle(rng);
    let weights = (0..config.k_true)
        .map(|k| {
            let mut w: Vec<f64> = order.iter().map(|&i| base[i]).collect();
            for &c in &order[k * SIGNATURE_CODES..(k + 1) * SIGNATURE_CODES] {
                w[c] += base[0] * SIGNATURE_BOOST / SIGNATURE_CODES as f64;
            }
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let risk_offset = (0..config.k_true)
        .map(|k| {
            if config.k_true == 1 {
                0.0
            } else {
                -1.0 + 2.0 * k as f64 / (config.k_true - 1) as f64
            }
        })
        .collect();
    CodeProfiles { weights, risk_offset }
}

fn draw_codes(profile: &WeightedIndex<f64>, n: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    let mut tries = 0;
    while set.len() < n && tries < 20 * n {
        set.insert(RESERVED_CODES + profile.sample(rng));
        tries += 1;
    }
    set
}

/// Draws distinct days from `lo..hi` (exclusive), sorted.
fn distinct_days(lo: i64, hi: i64, n: usize, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let mut set = BTreeSet::new();
    if hi <= lo {
        return Vec::new();
    }
    let n = n.min((hi - lo) as usize);
    while set.len() < n {
        set.insert(rng.gen_range(lo..hi));
    }
    set.into_iter().collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates the corpus, its drug catalog and the per-patient oracle.
pub fn generate_claims(config: &ClaimsConfig) -> Result<ClaimsCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profiles = code_profiles(config, &mut rng);
    let catalog = DrugCatalog::round_robin(config.n_drugs, config.n_classes);
    let prevalence = WeightedIndex::new(config.prevalence()).map_err(|e| StedrError::InvalidConfig(e.to_string()))?;
    let popularity = WeightedIndex::new(
        (0..config.n_drugs).map(|d| 1.0 / (d as f64 + config.popularity_offset)),
    )
    .expect("positive weights");

    let mut patients = Vec::with_capacity(config.n_patients);
    let mut oracle = Vec::with_capacity(config.n_patients);
    for id in 0..config.n_patients {
        let k = prevalence.sample(&mut rng);
        let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
        let age_at_first_code: u32 = rng.gen_range(45..=80);
        let drug = popularity.sample(&mut rng);
        let index_day: i64 = rng.gen_range(200..1800);

        // Baseline visits, always including day 0.
        let n_base = rng.gen_range(4..=14);
        let mut base_days = distinct_days(1, index_day, n_base - 1, &mut rng);
        base_days.insert(0, 0);
        let mut visits: Vec<(i64, BTreeSet<usize>)> = base_days
            .iter()
            .map(|&d| {
                let n = rng.gen_range(2..=7);
                (d, draw_codes(&profiles.weights[k], n, &mut rng))
            })
            .collect();
        if rng.gen_bool(0.9) {
            let v = rng.gen_range(0..visits.len());
            visits[v].1.insert(ONSET_CODE);
        }
        if rng.gen_bool(0.04) {
            let v = rng.gen_range(0..visits.len());
            visits[v].1.insert(OUTCOME_CODE);
        }

        let z = 0.35 * (f64::from(age_at_first_code) - 62.5) / 10.0
            + if sex == Sex::Male { 0.2 } else { -0.2 }
            + profiles.risk_offset[k]
            + 0.3 * rng.gen_range(-1.0..1.0);
        let risk_untreated = RISK_LOW + (RISK_HIGH - RISK_LOW) * logistic(z);
        let risk_treated = risk_untreated + config.effect(drug, k);
        let u: f64 = rng.gen();
        let outcome_untreated = u8::from(u < risk_untreated);
        let outcome_treated = u8::from(u < risk_treated);

        // Follow-up visits; the outcome code lands inside the window only if it occurs.
        let n_post = rng.gen_range(2..=8);
        let post_days = distinct_days(index_day + 1, index_day + FOLLOW_UP_DAYS + 200, n_post, &mut rng);
        for d in post_days {
            let n = rng.gen_range(2..=7);
            visits.push((d, draw_codes(&profiles.weights[k], n, &mut rng)));
        }
        if outcome_treated == 1 {
            let d = index_day + rng.gen_range(30..FOLLOW_UP_DAYS);
            match visits.iter_mut().find(|(vd, _)| *vd == d) {
                Some(v) => {
                    v.1.insert(OUTCOME_CODE);
                }
                None => visits.push((d, BTreeSet::from([OUTCOME_CODE]))),
            }
        }
        visits.sort_by_key(|(d, _)| *d);

        let mut prescriptions = vec![Prescription { day: index_day, drug }];
        if rng.gen_bool(config.early_prescription_rate) {
            let other = (drug + rng.gen_range(1..config.n_drugs)) % config.n_drugs;
            let day = rng.gen_range(0..index_day.min(365));
            prescriptions.insert(0, Prescription { day, drug: other });
        }

        patients.push(ClaimsPatient {
            id,
            age_at_first_code,
            sex,
            visits: visits
                .into_iter()
                .map(|(day, codes)| Visit {
                    day,
                    codes: codes.into_iter().collect(),
                })
                .collect(),
            prescriptions,
        });
        oracle.push(PatientOracle {
            id,
            latent_subgroup: k,
            index_drug: drug,
            risk_untreated,
            risk_treated,
            outcome_untreated,
            outcome_treated,
        });
    }
    Ok(ClaimsCorpus {
        config: config.clone(),
        db: ClaimsDb {
            n_codes: config.n_codes,
            patients,
        },
        catalog,
        oracle,
    })
}

/// Mean oracle risk difference per latent subgroup, over patients whose
/// index drug is `drug` (all patients when `None`, with that drug's
/// effect applied to everyone).
pub fn oracle_subgroup_effects(corpus: &ClaimsCorpus, drug: Option<usize>) -> Vec<Option<f64>> {
    let k = corpus.config.k_true;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for o in &corpus.oracle {
        if drug.is_none_or(|d| d == o.index_drug) {
            sums[o.latent_subgroup] += f64::from(o.outcome_treated) - f64::from(o.outcome_untreated);
            counts[o.latent_subgroup] += 1;
        }
    }
    (0..k)
        .map(|g| (counts[g] > 0).then(|| sums[g] / counts[g] as f64))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: ClaimsConfig,
    catalog: DrugCatalog,
    n_codes: usize,
}

/// Writes `<path>` (one patient per line), the catalog and configuration to
/// `<path>.meta.json`, and the oracle to `<path>.oracle.jsonl`.
pub fn write_corpus(corpus: &ClaimsCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = CorpusHeader {
        config: corpus.config.clone(),
        catalog: corpus.catalog.clone(),
        n_codes: corpus.db.n_codes,
    };
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&header)?)?;
    for p in &corpus.db.patients {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut o = BufWriter::new(std::fs::File::create(oracle_path(path))?);
    for rec in &corpus.oracle {
        serde_json::to_writer(&mut o, rec)?;
        o.write_all(b"\n")?;
    }
    o.flush()?;
    Ok(())
}

pub fn oracle_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".oracle.jsonl");
    s.into()
}

/// Reads a corpus; the oracle is loaded when its sidecar exists.
pub fn read_corpus(path: &Path) -> Result<ClaimsCorpus> {
    let meta = meta_path(path);
    let header: CorpusHeader = match std::fs::read(&meta) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) => return invalid(format!("cannot read metadata {}: {e}", meta.display())),
    };
    let lines = BufReader::new(std::fs::File::open(path)?).lines();
    let mut patients = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            patients.push(serde_json::from_str::<ClaimsPatient>(&line)?);
        }
    }
    for p in &patients {
        if p.visits.windows(2).any(|w| w[0].day >= w[1].day) {
            return invalid(format!("patient {} has non-increasing visit days", p.id));
        }
        if p.visits.iter().flat_map(|v| &v.codes).any(|&c| c >= header.n_codes) {
            return invalid(format!("patient {} has a code outside the vocabulary", p.id));
        }
    }
    let op = oracle_path(path);
    let oracle = if op.exists() {
        BufReader::new(std::fs::File::open(op)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str::<PatientOracle>(&l?)?))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(ClaimsCorpus {
        config: header.config,
        db: ClaimsDb {
            n_codes: header.n_codes,
            patients,
        },
        catalog: header.catalog,
        oracle,
    })
}
