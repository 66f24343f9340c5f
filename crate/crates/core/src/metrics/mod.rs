//! Evaluation metrics: effect-estimation error, subgroup variance
//! statistics, covariate balance, multiple-testing adjustment and trial
//! aggregation.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Divisor convention for the subgroup variance statistics: `n` (population).
pub const POPULATION_VARIANCE: bool = true;
/// A covariate is unbalanced when `|SMD|` exceeds this.
pub const SMD_THRESHOLD: f64 = 0.1;
/// A cohort is balanced when at most this fraction of covariates is unbalanced.
pub const MAX_UNBALANCED_FRACTION: f64 = 0.02;
/// Two-sided 95% normal quantile used for every confidence interval.
pub const Z95: f64 = 1.96;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return invalid(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return invalid("empty input");
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let denom = if POPULATION_VARIANCE { v.len() } else { v.len() - 1 };
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / denom as f64
}

/// Mean squared error between estimated and true individual effects.
pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_pair(tau_hat, tau_true)?;
    let s: f64 = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(s / tau_hat.len() as f64)
}

/// Absolute error of the average effect.
pub fn eps_ate(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_pair(tau_hat, tau_true)?;
    Ok((mean(tau_hat) - mean(tau_true)).abs())
}

/// `(V_within, V_across)` over the non-empty subgroups.
pub fn variance_stats(tau_hat: &[f64], labels: &[usize], k: usize) -> Result<(f64, f64)> {
    if tau_hat.len() != labels.len() {
        return invalid("effects and labels differ in length");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return invalid(format!("label {bad} outside [0, {k})"));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&t, &l) in tau_hat.iter().zip(labels) {
        groups[l].push(t);
    }
    let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() {
        return invalid("every subgroup is empty");
    }
    let within = groups.iter().map(|g| population_variance(g)).sum::<f64>() / groups.len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    Ok((within, population_variance(&means)))
}

/// Standardized mean differences of every covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdSummary {
    /// Non-finite entries mark zero pooled variance with differing means.
    pub smd_per_covariate: Vec<f64>,
    pub unbalanced_fraction: f64,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub smd_per_covariate: Vec<f64>,
    pub unbalanced_fraction: f64,
    pub weighted_auc: f64,
    pub balanced: bool,
}

impl BalanceReport {
    pub fn new(smd: SmdSummary, weighted_auc: f64) -> Self {
        Self {
            smd_per_covariate: smd.smd_per_covariate,
            unbalanced_fraction: smd.unbalanced_fraction,
            weighted_auc,
            balanced: smd.balanced,
        }
    }
}

/// Weighted mean and reliability-weighted variance of one column; unit
/// weights reduce to the sample (n - 1) variance.
fn weighted_moments(rows: &[Vec<f64>], w: &[f64], j: usize) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let m = rows.iter().zip(w).map(|(r, wi)| wi * r[j]).sum::<f64>() / sw;
    let ss = rows.iter().zip(w).map(|(r, wi)| wi * (r[j] - m).powi(2)).sum::<f64>();
    let denom = sw - sw2 / sw;
    (m, if denom > 0.0 { ss / denom } else { 0.0 })
}

/// Pooled-variance SMD `(x̄_T - x̄_C) / √((s²_T + s²_C) / 2)` per covariate.
pub fn smd_balance(
    case: &[Vec<f64>],
    control: &[Vec<f64>],
    weights: Option<(&[f64], &[f64])>,
) -> Result<SmdSummary> {
    if case.len() < 2 || control.len() < 2 {
        return invalid("each arm needs at least two rows");
    }
    let d = case[0].len();
    if case.iter().chain(control).any(|r| r.len() != d) {
        return invalid("rows differ in width");
    }
    if d == 0 {
        return invalid("no covariates");
    }
    let unit_case = vec![1.0; case.len()];
    let unit_control = vec![1.0; control.len()];
    let (wc, wk) = match weights {
        Some((a, b)) => {
            if a.len() != case.len() || b.len() != control.len() {
                return invalid("weights do not match the arms");
            }
            if a.iter().chain(b).any(|w| !(w.is_finite() && *w >= 0.0)) {
                return invalid("weights must be finite and non-negative");
            }
            (a, b)
        }
        None => (unit_case.as_slice(), unit_control.as_slice()),
    };
    let smd: Vec<f64> = (0..d)
        .map(|j| {
            let (mt, vt) = weighted_moments(case, wc, j);
            let (mc, vc) = weighted_moments(control, wk, j);
            let pooled = ((vt + vc) / 2.0).sqrt();
            let diff = mt - mc;
            if pooled > 0.0 {
                diff / pooled
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        })
        .collect();
    let unbalanced = smd.iter().filter(|s| s.abs() > SMD_THRESHOLD).count();
    let fraction = unbalanced as f64 / d as f64;
    Ok(SmdSummary {
        smd_per_covariate: smd,
        unbalanced_fraction: fraction,
        balanced: fraction <= MAX_UNBALANCED_FRACTION,
    })
}

/// Weighted probability that a treated unit outranks a control (ties ½).
pub fn weighted_auc(labels: &[u8], scores: &[f64], weights: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.len() != weights.len() {
        return invalid("labels, scores and weights differ in length");
    }
    if !labels.contains(&1) || !labels.contains(&0) {
        return invalid("both classes must be present");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("scores contain NaN");
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut control_below = 0.0;
    let mut num = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut tie_t, mut tie_c) = (0.0, 0.0);
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tie_t += weights[idx];
            } else {
                tie_c += weights[idx];
            }
        }
        num += tie_t * control_below + 0.5 * tie_t * tie_c;
        control_below += tie_c;
        i = j;
    }
    let wt: f64 = labels.iter().zip(weights).filter(|(l, _)| **l == 1).map(|(_, w)| w).sum();
    let wc: f64 = labels.iter().zip(weights).filter(|(l, _)| **l == 0).map(|(_, w)| w).sum();
    if wt * wc <= 0.0 {
        return invalid("class weights must be positive");
    }
    Ok(num / (wt * wc))
}

/// Benjamini–Hochberg adjusted p-values in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("p-value {bad} outside [0, 1]"));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (0..m).rev() {
        let i = order[rank];
        let v = p_values[i] * m as f64 / (rank + 1) as f64;
        running = running.min(v);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Probability that the effect is non-negative (benefit = negative effect).
    #[default]
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mean: f64,
    pub low: f64,
    pub up: f64,
    pub p_value: f64,
}

/// Mean, normal 95% interval and p-value of each column of per-trial effects.
pub fn trial_aggregate(ates: &[Vec<f64>], side: Sidedness) -> Result<Vec<TrialSummary>> {
    let n = ates.len();
    if n < 2 {
        return invalid("at least two trials are required");
    }
    let k = ates[0].len();
    if ates.iter().any(|r| r.len() != k) {
        return invalid("every trial must report the same number of effects");
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((0..k)
        .map(|j| {
            let col: Vec<f64> = ates.iter().map(|r| r[j]).collect();
            let m = mean(&col);
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let se = sd / (n as f64).sqrt();
            let one_sided = if se > 0.0 {
                normal.cdf(m / se)
            } else if m < 0.0 {
                0.0
            } else if m > 0.0 {
                1.0
            } else {
                0.5
            };
            let p_value = match side {
                Sidedness::OneSided => one_sided,
                Sidedness::TwoSided => (2.0 * one_sided.min(1.0 - one_sided)).min(1.0),
            };
            TrialSummary {
                mean: m,
                low: m - Z95 * se,
                up: m + Z95 * se,
                p_value,
            }
        })
        .collect())
}

/// Flat metrics report; absent entries are omitted from the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pehe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_ate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_within: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_across: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factual_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}
