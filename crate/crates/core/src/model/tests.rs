use super::*;
use crate::data::generate_synthetic_a;
use crate::nn::fd_relative_error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        k: 2,
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

fn tiny_data(n: usize, m: usize, t: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..n)
        .map(|_| {
            let rows: Vec<(Vec<f64>, f64)> = (0..t)
                .map(|v| ((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(), (t - 1 - v) as f64 * 30.0))
                .collect();
            VisitSequence::from_dense_rows(m, &rows)
        })
        .collect();
    let treatment: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let outcome = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    TrainingData::new(seqs, treatment, outcome).unwrap()
}

fn build(config: &TrainConfig, n_codes: usize) -> (Architecture, ParamStore) {
    let mut store = ParamStore::new();
    let arch = Architecture::build(config, n_codes, &mut store, &mut ChaCha8Rng::seed_from_u64(config.seed));
    (arch, store)
}

fn model_from(config: &TrainConfig, data: &TrainingData) -> TrainedModel {
    let (arch, store) = build(config, data.n_codes());
    TrainedModel {
        config: config.clone(),
        n_codes: data.n_codes(),
        arch,
        store,
        pr_t: 0.5,
        scaling: None,
        outcome_scale: OutcomeScale::identity(),
        history: Vec::new(),
        best_epoch: 0,
        split: DataSplit::random(data.len(), config.split, 0),
    }
}

fn copy_mlp(store: &mut ParamStore, from: &Mlp, to: &Mlp) {
    for (a, b) in from.layers.iter().zip(&to.layers) {
        let w = store.value(a.weight).clone();
        *store.value_mut(b.weight) = w;
        let bias = store.value(a.bias).clone();
        *store.value_mut(b.bias) = bias;
    }
}

#[test]
fn identical_outcome_heads_give_zero_effect() {
    let data = tiny_data(10, 4, 3, 1);
    let mut model = model_from(&tiny_config(), &data);
    let (y0, y1) = (model.arch.heads.y0.clone(), model.arch.heads.y1.clone());
    copy_mlp(&mut model.store, &y0, &y1);
    for e in estimate_effects(&model, &data.seqs).unwrap() {
        assert_eq!(e.tau_hat, 0.0);
        assert_eq!(e.tau_hat, e.y1_hat - e.y0_hat);
    }
    let e = forward_heads(&model, &[0.3, -0.1, 0.7, 0.2]).unwrap();
    assert_eq!(e.tau_hat, 0.0);
}

#[test]
fn ablated_mixture_uses_global_mean() {
    let data = tiny_data(10, 4, 3, 2);
    let config = TrainConfig {
        ablate_gmm: true,
        ..tiny_config()
    };
    let model = model_from(&config, &data);
    let xhat = [0.5, -0.2, 0.1, 0.9];
    let e = forward_heads(&model, &xhat).unwrap();
    assert_eq!(e.subgroup, 0);
    let tape = Tape::new();
    let p = model.store.bind(&tape, false);
    let x = tape.constant(Array2::from_shape_vec((1, 4), xhat.to_vec()).unwrap());
    let (g, locals) = distribution_vars(&model.arch.subgroup, &p, &x);
    assert!(locals.is_empty());
    let y0 = model.arch.heads.y0.forward(&p, &g.mean).item();
    assert_eq!(e.y0_hat, y0);
    assert!(estimate_effects(&model, &data.seqs).unwrap().iter().all(|e| e.subgroup == 0));
}

#[test]
fn subgroup_labels_in_range_and_propensity_clipped() {
    let data = tiny_data(30, 4, 3, 3);
    let config = TrainConfig { k: 3, ..tiny_config() };
    let model = model_from(&config, &data);
    for e in estimate_effects(&model, &data.seqs).unwrap() {
        assert!(e.subgroup < 3);
        assert!(e.t_hat >= 0.05 && e.t_hat <= 0.95);
    }
}

#[test]
fn iptw_examples() {
    let w = iptw_weights(&[0.5], &[1], 0.5, IptwMode::LiteralSum, 0.05).unwrap();
    assert_eq!(w, vec![2.0]);
    let w = iptw_weights(&[0.6], &[0], 0.3, IptwMode::LiteralSum, 0.05).unwrap()[0];
    assert!((w - (0.3 / 0.6 + 0.7 / 0.4)).abs() < 1e-15);
    assert!((w - 2.25).abs() < 1e-12);
    let w = iptw_weights(&[0.6, 0.6], &[1, 0], 0.3, IptwMode::TreatmentConditional, 0.05).unwrap();
    assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.75).abs() < 1e-15);
    // Clipping bounds the weight.
    let w = iptw_weights(&[1e-9], &[1], 0.5, IptwMode::LiteralSum, 0.05).unwrap()[0];
    assert!((w - (0.5 / 0.05 + 0.5 / 0.95)).abs() < 1e-12);
    for pr in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(
            iptw_weights(&[0.5], &[1], pr, IptwMode::LiteralSum, 0.05),
            Err(StedrError::PositivityViolation(_))
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn literal_sum_weight_lower_bound(pr in 0.001f64..0.999, t in 0.0f64..1.0) {
        let w = iptw_weights(&[t], &[1], pr, IptwMode::LiteralSum, 0.05).unwrap()[0];
        let bound = (pr.sqrt() + (1.0 - pr).sqrt()).powi(2);
        prop_assert!(w >= bound - 1e-12);
        prop_assert!(bound >= 1.0 - 1e-12);
    }
}

#[test]
fn literal_sum_bound_is_attained() {
    for pr in [0.1f64, 0.3, 0.5, 0.8] {
        let t = pr.sqrt() / (pr.sqrt() + (1.0 - pr).sqrt());
        let w = iptw_weights(&[t], &[0], pr, IptwMode::LiteralSum, 0.01).unwrap()[0];
        assert!((w - (pr.sqrt() + (1.0 - pr).sqrt()).powi(2)).abs() < 1e-12);
    }
}

/// Forward values of a batch built directly from constants.
fn constant_forward<'t>(tape: &'t Tape, y0: &[f64], y1: &[f64], t: &[f64], k: &[[f64; 2]]) -> ForwardVars<'t> {
    let col = |v: &[f64]| tape.constant(Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap());
    let n = y0.len();
    let z = tape.constant(Array2::zeros((n, 2)));
    let g = GaussianVars { mean: z, log_var: z };
    let k_logits = tape.constant(Array2::from_shape_fn((n, 2), |(i, j)| k[i][j]));
    ForwardVars {
        xhat: z,
        global: g,
        locals: Vec::new(),
        log_posterior: None,
        assigned: argmax_rows(&k_logits.value()),
        y0: col(y0),
        y1: col(y1),
        t_logit: col(t),
        k_logits: Some(k_logits),
        code_attention: None,
    }
}

#[test]
fn perfect_binary_predictions_drive_loss_to_zero() {
    let config = TrainConfig {
        outcome_kind: OutcomeKind::Binary,
        ..tiny_config()
    };
    let labels = BatchLabels {
        treatment: vec![1, 0, 1],
        outcome: vec![1.0, 0.0, 0.0],
    };
    let mut last = f64::INFINITY;
    for s in [5.0, 20.0, 60.0] {
        let tape = Tape::new();
        let f = constant_forward(
            &tape,
            &[0.0, -s, 0.0],
            &[s, 0.0, -s],
            &[s, -s, s],
            &[[s, -s], [-s, s], [s, -s]],
        );
        let (prop, ce, out, _) = pnn_terms(&config, &f, &labels, &[1.0, 1.0, 1.0]);
        let total = prop.item() + ce.item() + out.item();
        assert!(total < last);
        last = total;
    }
    assert!(last < 1e-20);
}

#[test]
fn doubling_weights_doubles_outcome_term_only() {
    let config = tiny_config();
    let labels = BatchLabels {
        treatment: vec![1, 0, 1, 0],
        outcome: vec![0.3, -1.0, 2.0, 0.5],
    };
    let tape = Tape::new();
    let f = constant_forward(
        &tape,
        &[0.1, 0.2, -0.3, 0.4],
        &[1.0, -0.5, 0.7, 0.0],
        &[0.3, -0.2, 1.1, 0.0],
        &[[0.2, 0.1], [0.0, 1.0], [2.0, -1.0], [0.3, 0.3]],
    );
    let w = [1.2, 0.7, 2.5, 1.0];
    let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let (p1, c1, o1, _) = pnn_terms(&config, &f, &labels, &w);
    let (p2, c2, o2, _) = pnn_terms(&config, &f, &labels, &w2);
    assert_eq!(p1.item(), p2.item());
    assert_eq!(c1.item(), c2.item());
    assert!((o2.item() - 2.0 * o1.item()).abs() < 1e-14);
    // Independent factual error: only the observed arm counts.
    let fact = [1.0 - 0.3, 0.2 + 1.0, 0.7 - 2.0, 0.4 - 0.5];
    let expected: f64 = fact.iter().zip(&w).map(|(e, w)| w * e * e).sum::<f64>();
    assert!((o1.item() - expected).abs() < 1e-14);
}

fn small_batch(data: &TrainingData) -> (EncoderBatch, BatchLabels) {
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = EncoderBatch::build(&data.seqs, 3, None).unwrap();
    let labels = BatchLabels {
        treatment: idx.iter().map(|&i| data.treatment[i]).collect(),
        outcome: data.outcome.clone(),
    };
    (batch, labels)
}

#[test]
fn total_loss_is_sum_of_parts() {
    let data = tiny_data(16, 5, 3, 4);
    let config = tiny_config();
    let (arch, store) = build(&config, 5);
    let (batch, labels) = small_batch(&data);
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let f = forward(&arch, &p, &batch, None);
    let frozen = freeze(&config, 0.5, &f, &labels, Some(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
    let l = batch_loss(&arch, &config, &p, &f, &labels, &frozen);
    let parts = l.kl.item() + l.td.item() + l.vae.item();
    assert_eq!(l.snn.item(), parts);
    assert_eq!(l.pnn.item(), l.propensity.item() + l.subgroup_ce.item() + l.outcome.item());
    assert_eq!(l.total.item(), l.snn.item() + l.pnn.item() + l.overlap.item());
    // The overlap term agrees with the value-level penalty on the same effects.
    let tau: Vec<f64> = f.y1.value().iter().zip(f.y0.value().iter()).map(|(a, b)| a - b).collect();
    let (pen, _) = overlap_penalty(&tau, &frozen.assigned, 2, config.alpha);
    assert!((l.overlap.item() - pen).abs() < 1e-14);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let data = tiny_data(16, 5, 3, 5);
    let config = TrainConfig {
        alpha: 0.5,
        ..tiny_config()
    };
    let (arch, store) = build(&config, 5);
    let (batch, labels) = small_batch(&data);
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let f = forward(&arch, &p, &batch, None);
    let frozen = freeze(&config, 0.5, &f, &labels, Some(&mut ChaCha8Rng::seed_from_u64(11))).unwrap();
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
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn full_model_has_more_parameters_than_ablation() {
    let full = build(&TrainConfig::default(), 30).1.n_scalars();
    let ablated = build(
        &TrainConfig {
            ablate_gmm: true,
            ..TrainConfig::default()
        },
        30,
    )
    .1
    .n_scalars();
    assert!(full > ablated);
}

#[test]
fn estimates_do_not_depend_on_batching() {
    let data = tiny_data(20, 4, 3, 6);
    let model = model_from(&tiny_config(), &data);
    let all = estimate_effects(&model, &data.seqs).unwrap();
    for (i, s) in data.seqs.iter().enumerate() {
        let one = estimate_effects(&model, std::slice::from_ref(s)).unwrap();
        assert!((one[0].tau_hat - all[i].tau_hat).abs() < 1e-12);
        assert_eq!(one[0].subgroup, all[i].subgroup);
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = tiny_data(40, 4, 3, 7);
    let config = tiny_config();
    let a = train(&config, &data).unwrap();
    let b = train(&config, &data).unwrap();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes, b.to_bytes().unwrap());
    let back = TrainedModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let mut bad = bytes.clone();
    bad[30] ^= 1;
    assert!(matches!(TrainedModel::from_bytes(&bad), Err(StedrError::Checkpoint(_))));
    assert!(TrainedModel::from_bytes(&bytes[..40]).is_err());
}

#[test]
fn early_stopping_returns_best_snapshot() {
    let data = tiny_data(40, 4, 3, 8);
    let config = TrainConfig {
        max_epochs: 8,
        patience: 3,
        learning_rate: 0.05,
        ..tiny_config()
    };
    let model = train(&config, &data).unwrap();
    let best = model.history[model.best_epoch].val_loss;
    assert!(model.history.iter().all(|r| best <= r.val_loss));
    assert!(best <= model.history.last().unwrap().val_loss);
}

#[test]
fn single_arm_training_split_is_rejected() {
    let mut data = tiny_data(20, 4, 3, 9);
    data.treatment = vec![1; 20];
    assert!(matches!(
        train(&tiny_config(), &data),
        Err(StedrError::PositivityViolation(_))
    ));
}

#[test]
fn diverging_training_reports_epoch() {
    let mut data = tiny_data(20, 4, 3, 10);
    for y in &mut data.outcome {
        *y *= 1e300;
    }
    let config = TrainConfig {
        standardize_outcome: false,
        ..tiny_config()
    };
    assert!(matches!(
        train(&config, &data),
        Err(StedrError::TrainingDiverged { epoch: 0, .. })
    ));
}

#[test]
fn synthetic_a_training_loss_descends() {
    let ds = generate_synthetic_a(1000, 0).unwrap();
    let data = TrainingData::from_samples(&ds.samples).unwrap();
    let config = TrainConfig {
        max_epochs: 6,
        patience: 10,
        ..TrainConfig::default()
    };
    let model = train(&config, &data).unwrap();
    assert!(model.history[5].train_loss < model.history[0].train_loss);
}
