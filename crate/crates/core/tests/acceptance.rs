//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Arguments that do not start with `-` filter criteria by name, as with
//! the default test harness.

mod common;

use common::{run_synthetic_a, SyntheticRun};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::time::Instant;
use stedr::autograd::Tape;
use stedr::data::{generate_synthetic_a, logistic, synthetic_a_means, SYNTHETIC_A_NORMALS, SYNTHETIC_A_TIME_RANGE};
use stedr::emulation::{generate_claims, run_screen, ClaimsConfig, EligibilityCriteria, ScreenConfig, Verdict};
use stedr::encoder::{
    attention_scores, encode_all, EncoderBatch, EncoderParams, EncoderShape, FeatureScaling, VisitSequence,
};
use stedr::metrics::bh_adjust;
use stedr::model::{
    batch_loss, forward, freeze, interval_overlap, iptw_weights, overlap_penalty, train, Architecture, BatchLabels,
    DataSplit, EpochRecord, IptwMode, OutcomeScale, TrainConfig, TrainedModel, TrainingData,
};
use stedr::nn::{fd_relative_error, ParamStore};
use stedr::subgroup::{subgroup_posterior, target_distribution_loss, GaussianParams};

const SEEDS: std::ops::Range<u64> = 0..10;
const SYNTHETIC_N: usize = 1000;
const SYNTHETIC_CONFIG: &str = "configs/synthetic_a.json";

struct Verdicts {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdicts {
    Verdicts { passed, detail }
}

/// Synthetic A runs shared by several criteria, computed on first use.
#[derive(Default)]
struct Runs {
    full: Option<(Vec<SyntheticRun>, f64)>,
    no_gmm: Option<Vec<SyntheticRun>>,
    no_attention: Option<Vec<SyntheticRun>>,
}

impl Runs {
    fn config() -> TrainConfig {
        common::load_config(SYNTHETIC_CONFIG)
    }

    fn full(&mut self) -> &(Vec<SyntheticRun>, f64) {
        self.full.get_or_insert_with(|| {
            let start = Instant::now();
            let config = Self::config();
            let runs = SEEDS.map(|s| run_synthetic_a(&config, SYNTHETIC_N, s)).collect();
            (runs, start.elapsed().as_secs_f64())
        })
    }

    fn ablated(config: TrainConfig) -> Vec<SyntheticRun> {
        SEEDS.map(|s| run_synthetic_a(&config, SYNTHETIC_N, s)).collect()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn pehe_average(runs: &mut Runs) -> Verdicts {
    let (full, secs) = runs.full();
    let avg = mean(full.iter().map(|r| r.pehe));
    let budget = 20.0 * 60.0;
    verdict(
        avg <= 0.05 && *secs < budget,
        format!("mean PEHE {avg:.4} over {} seeds (<= 0.05), {secs:.0}s (< {budget:.0}s)", full.len()),
    )
}

fn ate_average(runs: &mut Runs) -> Verdicts {
    let avg = mean(runs.full().0.iter().map(|r| r.eps_ate));
    verdict(avg <= 0.03, format!("mean eps_ATE {avg:.4} (<= 0.03)"))
}

fn ablation_order(runs: &mut Runs) -> Verdicts {
    let no_gmm = runs
        .no_gmm
        .get_or_insert_with(|| {
            Runs::ablated(TrainConfig {
                ablate_gmm: true,
                ..Runs::config()
            })
        })
        .clone();
    let no_attention = runs
        .no_attention
        .get_or_insert_with(|| {
            Runs::ablated(TrainConfig {
                ablate_attention: true,
                ..Runs::config()
            })
        })
        .clone();
    let full = &runs.full().0;
    let wins = (0..full.len())
        .filter(|&i| full[i].pehe < no_gmm[i].pehe && full[i].pehe < no_attention[i].pehe)
        .count();
    verdict(
        wins >= 7,
        format!(
            "full model best in {wins}/10 seeds (>= 7); mean PEHE full {:.4}, no mixture {:.4}, no attention {:.4}",
            mean(full.iter().map(|r| r.pehe)),
            mean(no_gmm.iter().map(|r| r.pehe)),
            mean(no_attention.iter().map(|r| r.pehe)),
        ),
    )
}

fn subgroup_variances(runs: &mut Runs) -> Verdicts {
    let full = &runs.full().0;
    let within = mean(full.iter().map(|r| r.v_within));
    let across = mean(full.iter().map(|r| r.v_across));
    verdict(
        within <= 0.35 && across >= 2.0,
        format!("V_within {within:.3} (<= 0.35), V_across {across:.3} (>= 2.0)"),
    )
}

fn metric_oracles() -> Verdicts {
    let start = Instant::now();
    let random = common::check_metrics_against_oracles(1000, 5, 1e-9);
    let worked = bh_adjust(&[0.01, 0.04, 0.03]).ok() == Some(vec![0.03, 0.04, 0.04]);
    let secs = start.elapsed().as_secs_f64();
    match random {
        Ok(()) => verdict(
            worked,
            format!("1000 random instances per metric within 1e-9, BH worked example exact: {worked}, {secs:.2}s"),
        ),
        Err(e) => verdict(false, e),
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        k: 2,
        alpha: 0.5,
        hidden: 4,
        embed_dim: 3,
        latent_dim: 2,
        heads: 2,
        head_layers: 1,
        max_visits: 3,
        batch_size: 8,
        max_epochs: 3,
        patience: 2,
        ..TrainConfig::default()
    }
}

fn dense_sequence(rng: &mut ChaCha8Rng, m: usize, t: usize) -> VisitSequence {
    let rows: Vec<(Vec<f64>, f64)> = (0..t)
        .map(|v| ((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(), (t - 1 - v) as f64 * 30.0))
        .collect();
    VisitSequence::from_dense_rows(m, &rows)
}

fn gradient_fidelity() -> Verdicts {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, m) = (16, 5);
    let seqs: Vec<VisitSequence> = (0..n).map(|_| dense_sequence(&mut rng, m, 3)).collect();
    let treatment: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let outcome: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let config = tiny_config();
    let mut store = ParamStore::new();
    let arch = Architecture::build(&config, m, &mut store, &mut ChaCha8Rng::seed_from_u64(config.seed));
    let batch = EncoderBatch::build(&seqs, config.max_visits, None).expect("batch");
    let labels = BatchLabels { treatment, outcome };
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let f = forward(&arch, &p, &batch, None);
    // Fixed latent noise: drawn once, then held constant under perturbation.
    let frozen = freeze(&config, 0.5, &f, &labels, Some(&mut ChaCha8Rng::seed_from_u64(11))).expect("freeze");
    let l = batch_loss(&arch, &config, &p, &f, &labels, &frozen);
    let grads = p.gradients(&tape.backward(l.total));
    let loss = |s: &ParamStore| {
        let tape = Tape::new();
        let p = s.bind(&tape, false);
        let f = forward(&arch, &p, &batch, Some(&frozen.assigned));
        batch_loss(&arch, &config, &p, &f, &labels, &frozen).total.item()
    };
    let ids: Vec<usize> = (0..store.len()).collect();
    let err = fd_relative_error(&store, &ids, &grads, loss);
    verdict(
        err <= 1e-4,
        format!("worst relative error {err:.2e} over {} tensors (<= 1e-4)", ids.len()),
    )
}

fn runner() -> TestRunner {
    let config = Config {
        cases: 500,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn check<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn near_one(v: f64) -> Result<(), TestCaseError> {
    prop_assert!((v - 1.0).abs() < 1e-6, "sum {}", v);
    Ok(())
}

fn encoder(m: usize, seed: u64) -> (ParamStore, EncoderParams) {
    let mut store = ParamStore::new();
    let shape = EncoderShape {
        n_codes: m,
        max_visits: 8,
        embed_dim: 3,
        hidden: 4,
        layers: 1,
        heads: 2,
        ablate_attention: false,
    };
    let params = EncoderParams::new(&mut store, shape, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, params)
}

fn code_sequence(rng: &mut ChaCha8Rng, m: usize, t: usize) -> VisitSequence {
    let mut day = 600.0;
    let visits: Vec<(Vec<usize>, f64)> = (0..t)
        .map(|_| {
            day -= rng.gen_range(1.0..100.0);
            ((0..m).filter(|_| rng.gen_bool(0.4)).collect(), f64::max(day, 0.0))
        })
        .collect();
    VisitSequence::from_code_sets(m, &visits)
}

fn random_model(seed: u64, k: usize, m: usize, ablate_gmm: bool, ablate_attention: bool) -> TrainedModel {
    let config = TrainConfig {
        k,
        ablate_gmm,
        ablate_attention,
        seed,
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let arch = Architecture::build(&config, m, &mut store, &mut rng);
    let seqs: Vec<VisitSequence> = (0..6).map(|_| dense_sequence(&mut rng, m, 2)).collect();
    let history = (0..rng.gen_range(0..4))
        .map(|epoch| EpochRecord {
            epoch,
            train_loss: rng.gen(),
            val_loss: rng.gen(),
            val_factual_mse: rng.gen(),
            val_kl: rng.gen(),
            val_td: rng.gen(),
            val_vae: rng.gen(),
            val_pnn: rng.gen(),
            val_overlap: rng.gen(),
        })
        .collect();
    TrainedModel {
        n_codes: m,
        arch,
        store,
        pr_t: rng.gen_range(0.05..0.95),
        scaling: if rng.gen_bool(0.5) { FeatureScaling::fit(&seqs) } else { None },
        outcome_scale: OutcomeScale {
            mean: rng.gen_range(-3.0..3.0),
            std: rng.gen_range(0.1..3.0),
        },
        history,
        best_epoch: 0,
        split: DataSplit::random(20, config.split, seed),
        config,
    }
}

fn invariant_suite() -> Verdicts {
    let checks: Vec<Result<(), String>> = vec![
        check("posterior simplex", (any::<u64>(), 1usize..6, 1usize..5), |(seed, k, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = || GaussianParams {
                mean: (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                log_variance: vec![0.0; p],
            };
            let global = g();
            let locals: Vec<GaussianParams> = (0..k).map(|_| g()).collect();
            let post = subgroup_posterior(&global, &locals);
            prop_assert!(post.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
            near_one(post.probs.iter().sum())
        }),
        check("target simplex", (any::<u64>(), 1usize..12, 1usize..6), |(seed, n, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probs = ndarray::Array2::from_shape_fn((n, k), |_| rng.gen_range(0.01..1.0f64));
            for mut row in probs.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            let t = target_distribution_loss(&probs).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for row in t.q.rows() {
                near_one(row.sum())?;
            }
            Ok(())
        }),
        check("attention sums to one", (any::<u64>(), 1usize..8, 1usize..6, 0usize..3), |(seed, m, t, masked)| {
            let (store, params) = encoder(m, seed);
            let mut seq = code_sequence(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), m, t);
            for _ in 0..masked {
                seq.push_masked();
            }
            let s = attention_scores(&store, &params, &seq, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
            near_one(s.a_d.iter().sum())?;
            near_one(s.a_v.iter().sum())?;
            near_one(s.matrix.sum())
        }),
        check("literal IPTW weight >= 1", (0.001f64..0.999, 0.0f64..1.0, 0u8..2), |(pr, t, arm)| {
            let w = iptw_weights(&[t], &[arm], pr, IptwMode::LiteralSum, 0.05)
                .map_err(|e| TestCaseError::fail(e.to_string()))?[0];
            prop_assert!(w >= 1.0 - 1e-12, "weight {}", w);
            Ok(())
        }),
        check("disjoint intervals give zero overlap", (any::<u64>(), 2usize..5, 0.1f64..0.5), |(seed, k, alpha)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut tau, mut labels) = (Vec::new(), Vec::new());
            for g in 0..k {
                for _ in 0..rng.gen_range(2..6) {
                    tau.push(100.0 * g as f64 + rng.gen_range(-1.0..1.0));
                    labels.push(g);
                }
            }
            prop_assert_eq!(overlap_penalty(&tau, &labels, k, alpha).0, 0.0);
            let a = (rng.gen_range(-5.0..0.0), 0.0);
            let b = (rng.gen_range(0.0..1.0), rng.gen_range(1.0..5.0));
            prop_assert_eq!(interval_overlap(a, b), 0.0);
            Ok(())
        }),
        check("masked visits change nothing", (any::<u64>(), 1usize..5, 1usize..4), |(seed, t, masked)| {
            let (store, params) = encoder(4, seed);
            let seq = code_sequence(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)), 4, t);
            let mut padded = seq.clone();
            for _ in 0..masked {
                padded.push_masked();
            }
            let a = encode_all(&store, &params, &[seq], None).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let b = encode_all(&store, &params, &[padded], None).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(a, b);
            Ok(())
        }),
        check(
            "checkpoint round trip",
            (any::<u64>(), 1usize..4, 1usize..6, any::<bool>(), any::<bool>()),
            |(seed, k, m, gmm, att)| {
                let model = random_model(seed, k, m, gmm, att);
                let bytes = model.to_bytes().map_err(|e| TestCaseError::fail(e.to_string()))?;
                let back = TrainedModel::from_bytes(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert!(back == model);
                prop_assert!(back.to_bytes().map_err(|e| TestCaseError::fail(e.to_string()))? == bytes);
                Ok(())
            },
        ),
    ];
    let n = checks.len();
    let failures: Vec<String> = checks.into_iter().filter_map(Result::err).collect();
    if failures.is_empty() {
        verdict(true, format!("{n} properties x 500 cases"))
    } else {
        verdict(false, failures.join("; "))
    }
}

/// Desk-scale screen of ten drugs with twenty trials each, repeated on
/// fresh corpora.
fn planted_screening() -> Verdicts {
    const REPS: u64 = 5;
    let budget = 2.0 * 3600.0;
    let (mut population, mut subgroup, mut null) = (0, 0, 0);
    let mut slowest: f64 = 0.0;
    let mut seen = Vec::new();
    for rep in 0..REPS {
        let corpus = generate_claims(&ClaimsConfig {
            seed: rep,
            ..ClaimsConfig::default()
        })
        .expect("corpus");
        let planted = |pred: fn(&[f64]) -> bool| {
            corpus
                .config
                .planted
                .iter()
                .find(|p| pred(&p.effects))
                .map(|p| p.drug)
                .expect("planted drug")
        };
        let negative = planted(|e| e.iter().all(|&v| v < 0.0));
        let mixed = planted(|e| e.iter().any(|&v| v < 0.0) && e.iter().any(|&v| v > 0.0));
        let zero = planted(|e| e.iter().all(|&v| v == 0.0));
        let config = ScreenConfig {
            n_trials: 20,
            seed: rep,
            ..ScreenConfig::default()
        };
        let drugs: Vec<usize> = (0..10).collect();
        let start = Instant::now();
        let report = run_screen(&corpus.db, &corpus.catalog, &drugs, &config).expect("screen");
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let verdict_of = |d: usize| report.report(d).map(|r| r.verdict);
        population += usize::from(verdict_of(negative) == Some(Verdict::PopulationCandidate));
        subgroup += usize::from(verdict_of(mixed) == Some(Verdict::SubgroupCandidate));
        null += usize::from(verdict_of(zero) == Some(Verdict::NotSignificant));
        seen.push(format!(
            "{}/{}/{}",
            verdict_of(negative).map_or("-", |v| v.as_str()),
            verdict_of(mixed).map_or("-", |v| v.as_str()),
            verdict_of(zero).map_or("-", |v| v.as_str()),
        ));
    }
    let reps = REPS as f64;
    let ok = population as f64 >= 0.8 * reps && subgroup as f64 >= 0.8 * reps && null as f64 >= 0.9 * reps;
    verdict(
        ok && slowest < budget,
        format!(
            "negative->population {population}/{REPS}, mixed->subgroup {subgroup}/{REPS}, null->not_significant {null}/{REPS}; \
             slowest screen {slowest:.0}s (< {budget:.0}s); verdicts {}",
            seen.join(" ")
        ),
    )
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn determinism() -> Verdicts {
    let ds = generate_synthetic_a(400, 3).expect("generator");
    let data = TrainingData::from_samples(&ds.samples).expect("data");
    let config = TrainConfig {
        max_epochs: 5,
        ..Runs::config()
    };
    let train_digest = |threads| in_pool(threads, || sha(&train(&config, &data).expect("train").to_bytes().expect("bytes")));
    let trains = [train_digest(1), train_digest(1), train_digest(4)];

    let corpus = generate_claims(&ClaimsConfig {
        n_patients: 4000,
        n_codes: 286,
        seed: 9,
        ..ClaimsConfig::default()
    })
    .expect("corpus");
    let screen = |threads| {
        let config = ScreenConfig {
            n_trials: 4,
            criteria: EligibilityCriteria {
                min_cases: 200,
                ..EligibilityCriteria::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                ..stedr::emulation::trial_train_config()
            },
            seed: 4,
            threads: Some(threads),
            ..ScreenConfig::default()
        };
        run_screen(&corpus.db, &corpus.catalog, &[0, 1, 5], &config)
            .expect("screen")
            .digest()
    };
    let screens = [screen(1), screen(1), screen(3)];
    let same = |v: &[String]| v.iter().all(|d| d == &v[0]);
    verdict(
        same(&trains) && same(&screens),
        format!(
            "train digests {} (threads 1, 1, 4), screen digests {} (threads 1, 1, 3)",
            if same(&trains) { "equal" } else { "differ" },
            if same(&screens) { "equal" } else { "differ" },
        ),
    )
}

fn generator_calibration() -> Verdicts {
    let n = 100_000;
    let ds = generate_synthetic_a(n, 2024).expect("generator");
    let nf = n as f64;
    let mut problems = Vec::new();
    let moment_check = |problems: &mut Vec<String>, name: String, values: Vec<f64>, mu: f64, sd: f64| {
        let m = values.iter().sum::<f64>() / nf;
        let s = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        // Four standard errors on the mean, two percent on the spread.
        if (m - mu).abs() > 4.0 * sd / nf.sqrt() || (s / sd - 1.0).abs() > 0.02 {
            problems.push(format!("{name}: mean {m:.4} sd {s:.4} vs {mu} / {sd:.4}"));
        }
    };
    let (lo, hi) = SYNTHETIC_A_TIME_RANGE;
    let time: Vec<f64> = ds.samples.iter().map(|s| s.covariates[0]).collect();
    if time.iter().any(|t| *t < lo || *t >= hi) {
        problems.push("time outside its range".into());
    }
    moment_check(&mut problems, "time".into(), time, (lo + hi) / 2.0, (hi - lo) / 12f64.sqrt());
    for (j, &(mu, sd)) in SYNTHETIC_A_NORMALS.iter().enumerate() {
        let col = ds.samples.iter().map(|s| s.covariates[j + 1]).collect();
        moment_check(&mut problems, format!("covariate {}", j + 1), col, mu, sd);
    }
    let treated = ds.samples.iter().filter(|s| s.treatment == 1).count();
    if treated != n / 2 {
        problems.push(format!("{treated} treated of {n}"));
    }
    let (mu0, mu1) = synthetic_a_means(0.0, 9.0);
    let at_nine = mu1 - mu0;
    let worst = ds
        .samples
        .iter()
        .map(|s| {
            let analytic = 4.0 * logistic(s.covariates[0] - 9.0) - 5.0;
            (s.mu1 - s.mu0 - analytic).abs().max((s.true_effect - analytic).abs())
        })
        .fold(0.0f64, f64::max);
    let effect_ok = (at_nine + 3.0).abs() <= 1e-12 && worst <= 1e-12;
    verdict(
        problems.is_empty() && effect_ok,
        format!(
            "{} covariates calibrated at n={n}{}; effect at x0=9 {at_nine}, worst stored-vs-analytic gap {worst:.1e}",
            SYNTHETIC_A_NORMALS.len() + 1,
            if problems.is_empty() { String::new() } else { format!(" except {}", problems.join(", ")) }
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let names = [
        "criterion_01_synthetic_a_pehe",
        "criterion_02_synthetic_a_ate",
        "criterion_03_ablation_order",
        "criterion_04_subgroup_variances",
        "criterion_05_metric_oracles",
        "criterion_06_gradient_fidelity",
        "criterion_07_invariants",
        "criterion_08_planted_screening",
        "criterion_09_determinism",
        "criterion_10_generator_calibration",
    ];
    if args.iter().any(|a| a == "--list") {
        for n in names {
            println!("{n}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let exact = args.iter().any(|a| a == "--exact");
    let selected = |name: &str| {
        filters.is_empty() || filters.iter().any(|f| if exact { name == f.as_str() } else { name.contains(f.as_str()) })
    };

    let mut runs = Runs::default();
    let mut failed = 0;
    let mut ran = 0;
    let mut out = std::io::stdout();
    for (i, name) in names.iter().enumerate() {
        if !selected(name) {
            continue;
        }
        let start = Instant::now();
        let v = match i {
            0 => pehe_average(&mut runs),
            1 => ate_average(&mut runs),
            2 => ablation_order(&mut runs),
            3 => subgroup_variances(&mut runs),
            4 => metric_oracles(),
            5 => gradient_fidelity(),
            6 => invariant_suite(),
            7 => planted_screening(),
            8 => determinism(),
            _ => generator_calibration(),
        };
        ran += 1;
        if !v.passed {
            failed += 1;
        }
        let _ = writeln!(
            out,
            "{name} ... {} [{:.1}s] {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        let _ = out.flush();
    }
    let _ = writeln!(out, "acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
