//! High-throughput screening: many emulated trials per drug, aggregated
//! into per-drug reports.

use super::corpus::{ClaimsDb, DrugCatalog};
use super::trial::{build_trial, emulate_trial, ControlMode, EligibilityCriteria, TrialResult, TrialSpec};
use crate::error::{Result, StedrError};
use crate::metrics::{bh_adjust, trial_aggregate, Sidedness, TrialSummary};
use crate::model::TrainConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Significance level for adjusted p-values.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    /// Trials per drug; the first half uses random controls, the rest
    /// same-class controls.
    pub n_trials: usize,
    pub criteria: EligibilityCriteria,
    pub train: TrainConfig,
    /// Drugs with fewer balanced trials are reported as unbalanced.
    pub min_balanced_trials: usize,
    pub sidedness: Sidedness,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            criteria: EligibilityCriteria::default(),
            train: trial_train_config(),
            min_balanced_trials: 2,
            sidedness: Sidedness::OneSided,
            seed: 0,
            threads: None,
        }
    }
}

/// Compact model used per emulated trial.
pub fn trial_train_config() -> TrainConfig {
    TrainConfig {
        k: 3,
        hidden: 16,
        embed_dim: 8,
        latent_dim: 4,
        heads: 2,
        max_visits: 8,
        batch_size: 256,
        learning_rate: 0.003,
        max_epochs: 12,
        patience: 4,
        ..TrainConfig::default()
    }
}

/// Seed of one trial, a pure function of the screen seed, drug and index.
pub fn trial_seed(base: u64, drug: usize, trial_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((drug as u64).to_le_bytes());
    h.update((trial_index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn trial_spec(config: &ScreenConfig, drug: usize, trial_index: usize) -> TrialSpec {
    TrialSpec {
        drug,
        trial_index,
        control_mode: if trial_index < config.n_trials.div_ceil(2) {
            ControlMode::Random
        } else {
            ControlMode::SameClass
        },
        seed: trial_seed(config.seed, drug, trial_index),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    PopulationCandidate,
    SubgroupCandidate,
    NotSignificant,
    Unbalanced,
    Ineligible,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::PopulationCandidate => "population_candidate",
            Verdict::SubgroupCandidate => "subgroup_candidate",
            Verdict::NotSignificant => "not_significant",
            Verdict::Unbalanced => "unbalanced",
            Verdict::Ineligible => "ineligible",
        }
    }
}

/// Aggregated effect with its BH-adjusted p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub mean: f64,
    pub low: f64,
    pub up: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugReport {
    pub drug: usize,
    pub class: usize,
    pub n_cases: usize,
    pub n_trials_run: usize,
    pub n_balanced_trials: usize,
    pub overall: Option<EffectSummary>,
    pub subgroups: Vec<Option<EffectSummary>>,
    /// Overall effect by control mode, unadjusted.
    pub by_control_mode: Vec<(ControlMode, Option<TrialSummary>)>,
    pub verdict: Verdict,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub reports: Vec<DrugReport>,
    /// Size of the hypothesis family the adjustment ran over.
    pub n_hypotheses: usize,
    pub hypothesis_family: String,
    /// Per-trial results in (drug, trial index) order.
    pub trials: Vec<TrialResult>,
}

impl ScreenReport {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("reports serialize")))
    }

    pub fn report(&self, drug: usize) -> Option<&DrugReport> {
        self.reports.iter().find(|r| r.drug == drug)
    }
}

/// Permutation of `k` labels minimizing the summed squared distance between
/// a trial's subgroup centroids and the reference ones. `perm[r]` is the
/// trial subgroup mapped onto reference subgroup `r`.
pub fn align_subgroups(reference: &[Option<Vec<f64>>], trial: &[Option<Vec<f64>>]) -> Vec<usize> {
    let k = reference.len();
    let cost = |r: usize, t: usize| match (&reference[r], trial.get(t).and_then(Option::as_ref)) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
        _ => 0.0,
    };
    let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(r, &t)| cost(r, t)).sum();
        if c < best.0 {
            best = (c, p.to_vec());
        }
    });
    best.1
}

/// Visits every permutation of `v[start..]` in lexicographic-by-swap order.
fn permute(v: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start + 1 >= v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, visit);
        v.swap(start, i);
    }
}

/// One completed or failed trial job.
type Outcome = (usize, usize, std::result::Result<TrialResult, String>);

fn run_job(db: &ClaimsDb, catalog: &DrugCatalog, config: &ScreenConfig, drug: usize, index: usize) -> Outcome {
    let spec = trial_spec(config, drug, index);
    let result = build_trial(db, catalog, spec, &config.criteria)
        .and_then(|cohort| emulate_trial(db, &cohort, &config.train))
        .map(|(r, _)| r)
        .map_err(|e| e.to_string());
    (drug, index, result)
}

struct Partial {
    report: DrugReport,
    /// Raw p-values: overall first, then subgroups.
    p_values: Vec<Option<f64>>,
}

fn summarize(config: &ScreenConfig, catalog: &DrugCatalog, drug: usize, n_cases: Option<usize>, runs: Vec<std::result::Result<TrialResult, String>>) -> Partial {
    let k = config.train.effective_k();
    let mut report = DrugReport {
        drug,
        class: catalog.class_of(drug).unwrap_or(0),
        n_cases: n_cases.unwrap_or(0),
        n_trials_run: 0,
        n_balanced_trials: 0,
        overall: None,
        subgroups: vec![None; k],
        by_control_mode: Vec::new(),
        verdict: Verdict::Ineligible,
        failures: Vec::new(),
    };
    let none = Partial {
        p_values: vec![None; k + 1],
        report: report.clone(),
    };
    if n_cases.is_none() {
        return none;
    }
    let mut balanced = Vec::new();
    for run in runs {
        match run {
            Ok(r) => {
                report.n_trials_run += 1;
                if r.balance.balanced {
                    balanced.push(r);
                }
            }
            Err(e) => report.failures.push(e),
        }
    }
    report.n_balanced_trials = balanced.len();
    if balanced.len() < config.min_balanced_trials.max(2) {
        report.verdict = Verdict::Unbalanced;
        return Partial {
            report,
            p_values: vec![None; k + 1],
        };
    }

    let reference = balanced[0].subgroup_centroids.clone();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); k];
    for r in &balanced {
        let perm = align_subgroups(&reference, &r.subgroup_centroids);
        for (g, &t) in perm.iter().enumerate() {
            if let Some(v) = r.subgroup_ate.get(t).copied().flatten() {
                columns[g].push(v);
            }
        }
    }
    let aggregate = |values: &[f64]| -> Option<TrialSummary> {
        (values.len() >= 2)
            .then(|| trial_aggregate(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>(), config.sidedness).ok())
            .flatten()
            .map(|s| s[0])
    };
    let overall: Vec<f64> = balanced.iter().map(|r| r.overall_ate).collect();
    let mut summaries = vec![aggregate(&overall)];
    summaries.extend(columns.iter().map(|c| aggregate(c)));
    let counts: Vec<usize> = std::iter::once(overall.len()).chain(columns.iter().map(Vec::len)).collect();

    for mode in [ControlMode::Random, ControlMode::SameClass] {
        let vals: Vec<f64> = balanced
            .iter()
            .filter(|r| r.spec.control_mode == mode)
            .map(|r| r.overall_ate)
            .collect();
        report.by_control_mode.push((mode, aggregate(&vals)));
    }
    report.verdict = Verdict::NotSignificant;
    let to_effect = |s: &TrialSummary, n: usize| EffectSummary {
        mean: s.mean,
        low: s.low,
        up: s.up,
        p_value: s.p_value,
        p_adjusted: f64::NAN,
        n_trials: n,
    };
    report.overall = summaries[0].as_ref().map(|s| to_effect(s, counts[0]));
    report.subgroups = (0..k)
        .map(|g| summaries[g + 1].as_ref().map(|s| to_effect(s, counts[g + 1])))
        .collect();
    Partial {
        p_values: summaries.iter().map(|s| s.map(|s| s.p_value)).collect(),
        report,
    }
}

pub(crate) fn verdict_of(report: &DrugReport) -> Verdict {
    let significant = |s: &Option<EffectSummary>| s.is_some_and(|s| s.p_adjusted < SIGNIFICANCE && s.mean < 0.0);
    if significant(&report.overall) {
        Verdict::PopulationCandidate
    } else if report.subgroups.iter().any(significant) {
        Verdict::SubgroupCandidate
    } else {
        Verdict::NotSignificant
    }
}

/// Emulates `config.n_trials` trials for every drug and reports verdicts.
/// Results depend only on the inputs and seeds, never on scheduling.
pub fn run_screen(db: &ClaimsDb, catalog: &DrugCatalog, drugs: &[usize], config: &ScreenConfig) -> Result<ScreenReport> {
    config.train.validate()?;
    if config.n_trials < 2 {
        return Err(StedrError::InvalidConfig("a screen needs at least two trials per drug".into()));
    }
    if let Some(&d) = drugs.iter().find(|&&d| d >= catalog.len()) {
        return Err(StedrError::InvalidArgument(format!("drug {d} is not in the catalog")));
    }
    let n_cases: Vec<Option<usize>> = drugs
        .iter()
        .map(|&d| {
            let n = super::trial::eligible_cases(db, d, &config.criteria).len();
            (n >= config.criteria.min_cases).then_some(n)
        })
        .collect();
    let jobs: Vec<(usize, usize)> = drugs
        .iter()
        .zip(&n_cases)
        .filter(|(_, n)| n.is_some())
        .flat_map(|(&d, _)| (0..config.n_trials).map(move |i| (d, i)))
        .collect();
    let execute = || -> Vec<Outcome> {
        jobs.par_iter()
            .map(|&(d, i)| run_job(db, catalog, config, d, i))
            .collect()
    };
    let mut outcomes = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| StedrError::InvalidConfig(e.to_string()))?
            .install(execute),
        None => execute(),
    };
    outcomes.sort_by_key(|(d, i, _)| (*d, *i));

    let mut partials = Vec::with_capacity(drugs.len());
    let mut trials = Vec::new();
    for (&drug, &n) in drugs.iter().zip(&n_cases) {
        let runs: Vec<_> = outcomes
            .iter()
            .filter(|(d, _, _)| *d == drug)
            .map(|(_, _, r)| r.clone())
            .collect();
        trials.extend(runs.iter().filter_map(|r| r.as_ref().ok().cloned()));
        partials.push(summarize(config, catalog, drug, n, runs));
    }

    let raw: Vec<f64> = partials.iter().flat_map(|p| p.p_values.iter().flatten().copied()).collect();
    let adjusted = bh_adjust(&raw)?;
    let mut next = adjusted.into_iter();
    let mut reports = Vec::with_capacity(partials.len());
    for mut p in partials {
        let slots = std::iter::once(&mut p.report.overall).chain(p.report.subgroups.iter_mut());
        for (slot, raw_p) in slots.zip(&p.p_values) {
            if raw_p.is_some() {
                if let Some(s) = slot.as_mut() {
                    s.p_adjusted = next.next().expect("one adjusted value per raw p-value");
                }
            }
        }
        if p.report.verdict == Verdict::NotSignificant {
            p.report.verdict = verdict_of(&p.report);
        }
        reports.push(p.report);
    }
    Ok(ScreenReport {
        reports,
        n_hypotheses: raw.len(),
        hypothesis_family: "overall and every subgroup of every drug with an aggregated estimate".into(),
        trials,
    })
}

/// One CSV row per drug and effect (overall, then each subgroup).
pub fn write_report_csv(report: &ScreenReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["drug", "class", "effect", "mean", "low", "up", "p", "p_adj", "n_trials", "verdict"])?;
    for r in &report.reports {
        let rows = std::iter::once(("overall".to_string(), r.overall))
            .chain(r.subgroups.iter().enumerate().map(|(g, s)| (format!("subgroup_{g}"), *s)));
        for (name, s) in rows {
            let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
            w.write_record([
                r.drug.to_string(),
                r.class.to_string(),
                name,
                f(s.map(|s| s.mean)),
                f(s.map(|s| s.low)),
                f(s.map(|s| s.up)),
                f(s.map(|s| s.p_value)),
                f(s.map(|s| s.p_adjusted)),
                s.map_or(0, |s| s.n_trials).to_string(),
                r.verdict.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &ScreenReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}
