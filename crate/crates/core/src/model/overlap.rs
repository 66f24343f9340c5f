use crate::autograd::Var;
use crate::metrics::Z95;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Batch confidence interval of one subgroup's estimated effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupInterval {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub up: f64,
}

/// Intervals `mean ± 1.96 sd / √n` (sample sd); `None` below two members.
pub fn subgroup_intervals(tau: &[f64], labels: &[usize], k: usize) -> Vec<Option<SubgroupInterval>> {
    (0..k)
        .map(|g| {
            let vals: Vec<f64> = tau
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == g)
                .map(|(t, _)| *t)
                .collect();
            let n = vals.len();
            if n < 2 {
                return None;
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let half = Z95 * sd / (n as f64).sqrt();
            Some(SubgroupInterval {
                n,
                mean,
                sd,
                low: mean - half,
                up: mean + half,
            })
        })
        .collect()
}

/// Length of the intersection of `[low_a, up_a]` and `[low_b, up_b]`.
pub fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// `alpha` times the summed pairwise overlap of the subgroup intervals.
pub fn overlap_penalty(
    tau: &[f64],
    labels: &[usize],
    k: usize,
    alpha: f64,
) -> (f64, Vec<Option<SubgroupInterval>>) {
    let cis = subgroup_intervals(tau, labels, k);
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            if let (Some(a), Some(b)) = (cis[i], cis[j]) {
                total += interval_overlap((a.low, a.up), (b.low, b.up));
            }
        }
    }
    (alpha * total, cis)
}

/// Overlap penalty on the tape, differentiable in `tau` (`n x 1`); labels
/// are constants.
pub(crate) fn overlap_var<'t>(tau: &Var<'t>, labels: &[usize], k: usize, alpha: f64) -> Var<'t> {
    let tv = tau.value();
    let values: Vec<f64> = tv.column(0).to_vec();
    let (penalty, cis) = overlap_penalty(&values, labels, k, alpha);
    // d penalty / d(up, low) per subgroup.
    let mut d_up = vec![0.0; k];
    let mut d_low = vec![0.0; k];
    for i in 0..k {
        for j in i + 1..k {
            let (Some(a), Some(b)) = (cis[i], cis[j]) else {
                continue;
            };
            if interval_overlap((a.low, a.up), (b.low, b.up)) <= 0.0 {
                continue;
            }
            if a.up < b.up {
                d_up[i] += alpha;
            } else if b.up < a.up {
                d_up[j] += alpha;
            } else {
                d_up[i] += 0.5 * alpha;
                d_up[j] += 0.5 * alpha;
            }
            if a.low > b.low {
                d_low[i] -= alpha;
            } else if b.low > a.low {
                d_low[j] -= alpha;
            } else {
                d_low[i] -= 0.5 * alpha;
                d_low[j] -= 0.5 * alpha;
            }
        }
    }
    let labels = labels.to_vec();
    let n = values.len();
    tau.tape()
        .push(Array2::from_elem((1, 1), penalty), &[*tau], move |g, _| {
            let g = g[[0, 0]];
            let mut d = Array2::zeros((n, 1));
            for (r, &l) in labels.iter().enumerate() {
                let Some(ci) = cis[l] else { continue };
                let nk = ci.n as f64;
                let c = Z95 / nk.sqrt();
                let mut v = (d_up[l] + d_low[l]) / nk;
                if ci.sd > 0.0 {
                    v += c * (d_up[l] - d_low[l]) * (values[r] - ci.mean) / ((nk - 1.0) * ci.sd);
                }
                d[[r, 0]] = g * v;
            }
            vec![Some(d)]
        })
}
