//! Seeded benchmark generators with ground-truth potential-outcome means.
//!
//! * [`generate_synthetic_a`]: ten clinical covariates, logistic effect in
//!   the time-to-treatment covariate.
//! * [`generate_synthetic_b`]: autoregressive covariate histories of 10 to 20
//!   steps with outcomes from the final step.
//! * [`simulate_response_surface_b`]: non-linear control surface and linear
//!   treated surface attached to any covariate table.

mod io;
mod surface;

pub use io::{meta_path, read_covariate_csv, read_dataset, write_dataset, CovariateTable, DatasetFile};
pub use surface::{ihdp_like_covariates, simulate_response_surface_b, SURFACE_TARGET_EFFECT};

use crate::encoder::VisitSequence;
use crate::error::{invalid, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Days between consecutive steps when a sequential sample becomes a visit history.
pub const SEQUENCE_STEP_DAYS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorId {
    A,
    B,
    ResponseSurfaceB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub covariates: Vec<f64>,
    pub treatment: u8,
    pub observed_outcome: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub true_effect: f64,
}

impl SyntheticSample {
    fn new(covariates: Vec<f64>, treatment: u8, observed_outcome: f64, mu0: f64, mu1: f64) -> Self {
        Self {
            covariates,
            treatment,
            observed_outcome,
            mu0,
            mu1,
            true_effect: mu1 - mu0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<SyntheticSample>,
    pub covariate_names: Vec<String>,
    pub generator_id: GeneratorId,
    pub seed: u64,
    /// Drawn surface coefficients, followed by any calibration offsets.
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialSample {
    /// `timesteps x d`, oldest step first.
    pub covariate_history: Vec<Vec<f64>>,
    pub timesteps: usize,
    pub treatment: u8,
    pub observed_outcome: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub true_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialDataset {
    pub samples: Vec<SequentialSample>,
    pub covariate_names: Vec<String>,
    pub seed: u64,
    pub coefficients: Vec<f64>,
    pub config: SyntheticBConfig,
}

/// Treatment, outcome and ground truth viewed uniformly across generators.
pub trait LabeledSample {
    fn treatment(&self) -> u8;
    fn outcome(&self) -> f64;
    fn true_effect(&self) -> f64;
    fn to_sequence(&self) -> VisitSequence;
}

impl LabeledSample for SyntheticSample {
    fn treatment(&self) -> u8 {
        self.treatment
    }
    fn outcome(&self) -> f64 {
        self.observed_outcome
    }
    fn true_effect(&self) -> f64 {
        self.true_effect
    }
    fn to_sequence(&self) -> VisitSequence {
        VisitSequence::from_static(&self.covariates)
    }
}

impl LabeledSample for SequentialSample {
    fn treatment(&self) -> u8 {
        self.treatment
    }
    fn outcome(&self) -> f64 {
        self.observed_outcome
    }
    fn true_effect(&self) -> f64 {
        self.true_effect
    }
    fn to_sequence(&self) -> VisitSequence {
        let t = self.covariate_history.len();
        let d = self.covariate_history.first().map_or(0, |r| r.len());
        let rows = self
            .covariate_history
            .iter()
            .enumerate()
            .map(|(i, row)| (row.clone(), (t - 1 - i) as f64 * SEQUENCE_STEP_DAYS))
            .collect::<Vec<_>>();
        VisitSequence::from_dense_rows(d, &rows)
    }
}

pub const SYNTHETIC_A_NAMES: [&str; 10] = [
    "time_to_treatment_days",
    "age",
    "white_blood_cell_count",
    "lymphocyte_count",
    "platelet_count",
    "serum_creatinine",
    "aspartate_aminotransferase",
    "alanine_aminotransferase",
    "lactate_dehydrogenase",
    "creatine_kinase",
];

/// (mean, std) of the nine normally distributed Synthetic A covariates, in
/// the order of [`SYNTHETIC_A_NAMES`] after the time covariate.
pub const SYNTHETIC_A_NORMALS: [(f64, f64); 9] = [
    (66.0, 4.0),
    (66.0, 4.0),
    (0.8, 0.1),
    (183.0, 20.4),
    (68.0, 6.6),
    (31.0, 5.1),
    (26.0, 5.1),
    (339.0, 51.0),
    (76.0, 21.0),
];

pub const SYNTHETIC_A_TIME_RANGE: (f64, f64) = (4.0, 14.0);
pub const SYNTHETIC_A_NOISE_STD: f64 = 0.1;

/// Surface coefficient levels and their probabilities.
pub const BETA_LEVELS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const BETA_PROBS: [f64; 5] = [0.6, 0.1, 0.1, 0.1, 0.1];

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Control and treated outcome means of Synthetic A given the linear part
/// `X₋₀β` and the time covariate.
pub fn synthetic_a_means(linear: f64, time: f64) -> (f64, f64) {
    let s = logistic(time - 9.0);
    (linear + s + 5.0, linear + 5.0 * s)
}

pub(crate) fn draw_betas(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (level, p) in BETA_LEVELS.iter().zip(BETA_PROBS) {
                acc += p;
                if u < acc {
                    return *level;
                }
            }
            BETA_LEVELS[BETA_LEVELS.len() - 1]
        })
        .collect()
}

/// Column z-scores (sample standard deviation); constant columns map to zero.
pub(crate) fn standardize_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = rows.to_vec();
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = if n > 1 {
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let sd = var.sqrt();
        for row in out.iter_mut() {
            row[j] = if sd > 0.0 { (row[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Synthetic A: ten covariates, exactly `⌊n/2⌋` treated units.
pub fn generate_synthetic_a(n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n < 2 {
        return invalid(format!("synthetic A needs n >= 2, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let time = Uniform::new(SYNTHETIC_A_TIME_RANGE.0, SYNTHETIC_A_TIME_RANGE.1);
    let normals: Vec<Normal<f64>> = SYNTHETIC_A_NORMALS
        .iter()
        .map(|&(m, s)| Normal::new(m, s).expect("valid normal"))
        .collect();
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut row = Vec::with_capacity(10);
            row.push(time.sample(&mut rng));
            for dist in &normals {
                row.push(dist.sample(&mut rng));
            }
            row
        })
        .collect();
    let beta = draw_betas(&mut rng, 9);

    let others: Vec<Vec<f64>> = raw.iter().map(|r| r[1..].to_vec()).collect();
    let z = standardize_columns(&others);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut treated = vec![0u8; n];
    for &i in &order[..n / 2] {
        treated[i] = 1;
    }

    let noise = Normal::new(0.0, SYNTHETIC_A_NOISE_STD).expect("valid normal");
    let samples = (0..n)
        .map(|i| {
            let linear: f64 = z[i].iter().zip(&beta).map(|(x, b)| x * b).sum();
            let (mu0, mu1) = synthetic_a_means(linear, raw[i][0]);
            let t = treated[i];
            let mean = if t == 1 { mu1 } else { mu0 };
            let y = mean + noise.sample(&mut rng);
            SyntheticSample::new(raw[i].clone(), t, y, mu0, mu1)
        })
        .collect();

    Ok(SyntheticDataset {
        samples,
        covariate_names: SYNTHETIC_A_NAMES.iter().map(|s| s.to_string()).collect(),
        generator_id: GeneratorId::A,
        seed,
        coefficients: beta,
    })
}

/// Constants of the autoregressive generator that are not pinned by the
/// benchmark description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBConfig {
    pub n_covariates: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Mean of the lag-`l` coefficient, lag 1 first.
    pub lag_coefficient_means: Vec<f64>,
    pub lag_coefficient_std: f64,
    pub initial_std: f64,
    pub noise_std: f64,
    pub treatment_probability: f64,
    pub outcome_noise_std: f64,
}

impl Default for SyntheticBConfig {
    fn default() -> Self {
        Self {
            n_covariates: 25,
            min_steps: 10,
            max_steps: 20,
            lag_coefficient_means: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
            lag_coefficient_std: 0.1,
            initial_std: 10.0,
            noise_std: 1.0,
            treatment_probability: 0.5,
            outcome_noise_std: 1.0,
        }
    }
}

pub fn generate_synthetic_b(n: usize, seed: u64) -> Result<SequentialDataset> {
    generate_synthetic_b_with(n, seed, &SyntheticBConfig::default())
}

pub fn generate_synthetic_b_with(
    n: usize,
    seed: u64,
    cfg: &SyntheticBConfig,
) -> Result<SequentialDataset> {
    if n < 2 {
        return invalid(format!("synthetic B needs n >= 2, got {n}"));
    }
    if cfg.min_steps == 0 || cfg.min_steps > cfg.max_steps {
        return invalid("synthetic B step range must satisfy 1 <= min <= max");
    }
    let d = cfg.n_covariates;
    let lags = cfg.lag_coefficient_means.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, cfg.initial_std).map_err(|e| crate::error::StedrError::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| crate::error::StedrError::InvalidConfig(e.to_string()))?;
    let coef_noise = Normal::new(0.0, cfg.lag_coefficient_std).map_err(|e| crate::error::StedrError::InvalidConfig(e.to_string()))?;
    let steps = Uniform::new_inclusive(cfg.min_steps, cfg.max_steps);

    let mut histories = Vec::with_capacity(n);
    let mut treatment = Vec::with_capacity(n);
    for _ in 0..n {
        let t_len = steps.sample(&mut rng);
        let mut hist: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        hist.push((0..d).map(|_| init.sample(&mut rng)).collect());
        for t in 1..t_len {
            let coefs: Vec<f64> = cfg
                .lag_coefficient_means
                .iter()
                .map(|m| m + coef_noise.sample(&mut rng))
                .collect();
            let mut next = vec![0.0; d];
            for (l, c) in coefs.iter().enumerate().take(lags.min(t)) {
                let prev = &hist[t - 1 - l];
                for j in 0..d {
                    next[j] += c * prev[j];
                }
            }
            for v in next.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            hist.push(next);
        }
        histories.push(hist);
        treatment.push(u8::from(rng.gen::<f64>() < cfg.treatment_probability));
    }

    let finals: Vec<Vec<f64>> = histories.iter().map(|h| h.last().unwrap().clone()).collect();
    let surface_seed = rng.gen::<u64>();
    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let surface = surface::surface_from_rows(
        &finals,
        &treatment,
        names.clone(),
        surface_seed,
        cfg.outcome_noise_std,
    )?;

    let samples = histories
        .into_iter()
        .zip(surface.samples)
        .map(|(hist, s)| SequentialSample {
            timesteps: hist.len(),
            covariate_history: hist,
            treatment: s.treatment,
            observed_outcome: s.observed_outcome,
            mu0: s.mu0,
            mu1: s.mu1,
            true_effect: s.true_effect,
        })
        .collect();
    Ok(SequentialDataset {
        samples,
        covariate_names: names,
        seed,
        coefficients: surface.coefficients,
        config: cfg.clone(),
    })
}
