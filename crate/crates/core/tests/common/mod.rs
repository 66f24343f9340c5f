//! Helpers shared by the integration test targets: brute-force metric
//! definitions and a Synthetic A train-and-score runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stedr::data::generate_synthetic_a;
use stedr::metrics::{bh_adjust, eps_ate, pehe, smd_balance, variance_stats, weighted_auc};
use stedr::model::{estimate_effects, train, TrainConfig, TrainingData};

pub mod oracle {
    //! Definitional implementations, written for clarity over speed.

    pub fn pehe(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        s / a.len() as f64
    }

    pub fn eps_ate(a: &[f64], b: &[f64]) -> f64 {
        let ma: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let mb: f64 = b.iter().sum::<f64>() / b.len() as f64;
        (ma - mb).abs()
    }

    /// Population variance through the pairwise identity
    /// `Var = sum_{i,j} (x_i - x_j)^2 / (2 n^2)`.
    fn pairwise_variance(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (a - b) * (a - b);
            }
        }
        s / (2.0 * n * n)
    }

    pub fn v_within_across(tau: &[f64], labels: &[usize], k: usize) -> (f64, f64) {
        let mut within = Vec::new();
        let mut means = Vec::new();
        for g in 0..k {
            let members: Vec<f64> = tau.iter().zip(labels).filter(|(_, &l)| l == g).map(|(t, _)| *t).collect();
            if members.is_empty() {
                continue;
            }
            within.push(pairwise_variance(&members));
            means.push(members.iter().sum::<f64>() / members.len() as f64);
        }
        (within.iter().sum::<f64>() / within.len() as f64, pairwise_variance(&means))
    }

    /// Weighted mean and reliability-weighted variance, the latter from
    /// `sum_{i<j} w_i w_j (x_i - x_j)^2 / (W^2 - sum w^2)`.
    fn weighted_mean_var(x: &[f64], w: &[f64]) -> (f64, f64) {
        let total: f64 = w.iter().sum();
        let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
        let mut pairs = 0.0;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                pairs += w[i] * w[j] * (x[i] - x[j]).powi(2);
            }
        }
        let sq: f64 = w.iter().map(|v| v * v).sum();
        (mean, pairs / (total * total - sq))
    }

    pub fn smd(case: &[Vec<f64>], control: &[Vec<f64>], wc: &[f64], wk: &[f64]) -> Vec<f64> {
        (0..case[0].len())
            .map(|j| {
                let a: Vec<f64> = case.iter().map(|r| r[j]).collect();
                let b: Vec<f64> = control.iter().map(|r| r[j]).collect();
                let (ma, va) = weighted_mean_var(&a, wc);
                let (mb, vb) = weighted_mean_var(&b, wk);
                (ma - mb) / ((va + vb) / 2.0).sqrt()
            })
            .collect()
    }

    /// Weighted share of treated/control pairs ranked correctly, ties half.
    pub fn weighted_auc(labels: &[u8], scores: &[f64], w: &[f64]) -> f64 {
        let (mut num, mut wt, mut wc) = (0.0, 0.0, 0.0);
        for i in 0..labels.len() {
            if labels[i] == 1 {
                wt += w[i];
            } else {
                wc += w[i];
            }
        }
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    let win = if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                    num += w[i] * w[j] * win;
                }
            }
        }
        num / (wt * wc)
    }

    /// `min(1, min over p_j >= p_i of m p_j / rank_j)` with ties taking
    /// their largest rank.
    pub fn bh(p: &[f64]) -> Vec<f64> {
        let m = p.len() as f64;
        p.iter()
            .map(|&pi| {
                let mut best = f64::INFINITY;
                for &pj in p {
                    if pj >= pi {
                        let rank = p.iter().filter(|&&v| v <= pj).count() as f64;
                        best = best.min(m * pj / rank);
                    }
                }
                best.min(1.0)
            })
            .collect()
    }
}

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}

/// Compares each library metric with its oracle on `instances` random
/// inputs. Returns the first mismatch.
pub fn check_metrics_against_oracles(instances: usize, seed: u64, tol: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let n = rng.gen_range(1..40);
        let scale = 10f64.powi(rng.gen_range(-2..3));
        let a: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-3.0..3.0)).collect();

        let got = pehe(&a, &b).map_err(|e| e.to_string())?;
        if !close(got, oracle::pehe(&a, &b), tol) {
            return Err(format!("pehe instance {case}: {got} vs {}", oracle::pehe(&a, &b)));
        }
        let got = eps_ate(&a, &b).map_err(|e| e.to_string())?;
        if !close(got, oracle::eps_ate(&a, &b), tol) {
            return Err(format!("eps_ate instance {case}: {got} vs {}", oracle::eps_ate(&a, &b)));
        }

        let k = rng.gen_range(1..6);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (vw, va) = variance_stats(&a, &labels, k).map_err(|e| e.to_string())?;
        let (ow, oa) = oracle::v_within_across(&a, &labels, k);
        if !close(vw, ow, tol) {
            return Err(format!("v_within instance {case}: {vw} vs {ow}"));
        }
        if !close(va, oa, tol) {
            return Err(format!("v_across instance {case}: {va} vs {oa}"));
        }

        let d = rng.gen_range(1..6);
        let table = |rng: &mut ChaCha8Rng, rows: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..d).map(|_| shift + rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let shift = rng.gen_range(-0.5..0.5);
        let (nc, nk) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let case_rows = table(&mut rng, nc, shift);
        let control_rows = table(&mut rng, nk, 0.0);
        let weighted = rng.gen_bool(0.5);
        let wc: Vec<f64> = (0..nc).map(|_| if weighted { rng.gen_range(0.1..5.0) } else { 1.0 }).collect();
        let wk: Vec<f64> = (0..nk).map(|_| if weighted { rng.gen_range(0.1..5.0) } else { 1.0 }).collect();
        let got = smd_balance(&case_rows, &control_rows, weighted.then_some((&wc[..], &wk[..])))
            .map_err(|e| e.to_string())?;
        for (g, o) in got.smd_per_covariate.iter().zip(oracle::smd(&case_rows, &control_rows, &wc, &wk)) {
            if !close(*g, o, tol) {
                return Err(format!("smd instance {case}: {g} vs {o}"));
            }
        }

        let m = rng.gen_range(2..30);
        let mut labels: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        // Coarse scores so ties are common.
        let levels = rng.gen_range(1..8);
        let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..3.0)).collect();
        let got = weighted_auc(&labels, &scores, &w).map_err(|e| e.to_string())?;
        let want = oracle::weighted_auc(&labels, &scores, &w);
        if !close(got, want, tol) {
            return Err(format!("weighted_auc instance {case}: {got} vs {want}"));
        }

        let p: Vec<f64> = (0..rng.gen_range(1..25))
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0..5) as f64 / 50.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let got = bh_adjust(&p).map_err(|e| e.to_string())?;
        for (g, o) in got.iter().zip(oracle::bh(&p)) {
            if !close(*g, o, tol) {
                return Err(format!("bh instance {case}: {g} vs {o}"));
            }
        }
    }
    Ok(())
}

/// Scores of one Synthetic A run on its test split. Effect errors are in
/// standardized outcome units, subgroup variances in raw units.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticRun {
    pub pehe: f64,
    pub eps_ate: f64,
    pub v_within: f64,
    pub v_across: f64,
}

pub fn load_config(path: &str) -> TrainConfig {
    let full = concat!(env!("CARGO_MANIFEST_DIR"), "/../../");
    let text = std::fs::read_to_string(format!("{full}{path}")).expect("config file");
    serde_json::from_str(&text).expect("valid config")
}

pub fn run_synthetic_a(config: &TrainConfig, n: usize, seed: u64) -> SyntheticRun {
    let config = TrainConfig { seed, ..config.clone() };
    let ds = generate_synthetic_a(n, seed).expect("generator");
    let data = TrainingData::from_samples(&ds.samples).expect("training data");
    let model = train(&config, &data).expect("training");
    let test = data.subset(&model.split.test);
    let est = estimate_effects(&model, &test.seqs).expect("scoring");
    let sd = model.outcome_scale.std;
    let tau: Vec<f64> = est.iter().map(|e| e.tau_hat).collect();
    let truth: Vec<f64> = test.true_effect.expect("labeled").iter().map(|t| t / sd).collect();
    let labels: Vec<usize> = est.iter().map(|e| e.subgroup).collect();
    let raw: Vec<f64> = tau.iter().map(|t| t * sd).collect();
    let (v_within, v_across) = variance_stats(&raw, &labels, config.effective_k()).expect("variances");
    SyntheticRun {
        pehe: pehe(&tau, &truth).expect("pehe"),
        eps_ate: eps_ate(&tau, &truth).expect("eps_ate"),
        v_within,
        v_across,
    }
}
