use super::{
    batch_loss, forward, freeze, Architecture, BatchLabels, Monitor, OutcomeKind, OutcomeScale, TrainConfig,
    TrainedModel,
};
use crate::autograd::Tape;
use crate::data::LabeledSample;
use crate::encoder::{EncoderBatch, FeatureScaling, VisitSequence};
use crate::error::{invalid, Result, StedrError};
use crate::nn::{Optimizer, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream offsets so initialization, shuffling and splitting never share draws.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const SPLIT_STREAM: u64 = 0x5eed_0002;

/// Patients with observed treatment and outcome, plus the true effect when known.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub seqs: Vec<VisitSequence>,
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
    pub true_effect: Option<Vec<f64>>,
}

impl TrainingData {
    pub fn new(seqs: Vec<VisitSequence>, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        if seqs.is_empty() {
            return invalid("no samples");
        }
        if seqs.len() != treatment.len() || seqs.len() != outcome.len() {
            return invalid("sequence, treatment and outcome counts differ");
        }
        if treatment.iter().any(|&t| t > 1) {
            return invalid("treatment must be 0 or 1");
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return invalid("outcomes must be finite");
        }
        let m = seqs[0].n_codes;
        for s in &seqs {
            s.validate()?;
            if s.n_codes != m {
                return invalid("sequences disagree on the number of codes");
            }
        }
        Ok(Self {
            seqs,
            treatment,
            outcome,
            true_effect: None,
        })
    }

    /// From any labeled benchmark sample, keeping its true effect.
    pub fn from_samples<S: LabeledSample>(samples: &[S]) -> Result<Self> {
        let mut data = Self::new(
            samples.iter().map(|s| s.to_sequence()).collect(),
            samples.iter().map(|s| s.treatment()).collect(),
            samples.iter().map(|s| s.outcome()).collect(),
        )?;
        data.true_effect = Some(samples.iter().map(|s| s.true_effect()).collect());
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn n_codes(&self) -> usize {
        self.seqs[0].n_codes
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            seqs: idx.iter().map(|&i| self.seqs[i].clone()).collect(),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            outcome: idx.iter().map(|&i| self.outcome[i]).collect(),
            true_effect: self.true_effect.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }
}

/// Sample indices of the train, validation and test partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    /// Seeded random partition with the given fractions.
    pub fn random(n: usize, fractions: [f64; 3], seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1.min(n), n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        Self {
            train: idx,
            validation,
            test,
        }
    }
}

/// Losses of one epoch. Training loss is the mean batch objective; validation
/// values come from one pass over the whole split with zero latent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_factual_mse: f64,
    pub val_kl: f64,
    pub val_td: f64,
    pub val_vae: f64,
    pub val_pnn: f64,
    pub val_overlap: f64,
}

fn labels_of(data: &TrainingData, idx: &[usize], scale: &OutcomeScale) -> BatchLabels {
    BatchLabels {
        treatment: idx.iter().map(|&i| data.treatment[i]).collect(),
        outcome: idx.iter().map(|&i| scale.to_model(data.outcome[i])).collect(),
    }
}

fn seqs_of(data: &TrainingData, idx: &[usize]) -> Vec<VisitSequence> {
    idx.iter().map(|&i| data.seqs[i].clone()).collect()
}

/// Trains on a seeded split drawn from `config.split`.
pub fn train(config: &TrainConfig, data: &TrainingData) -> Result<TrainedModel> {
    let split = DataSplit::random(data.len(), config.split, config.seed);
    train_with_split(config, data, split)
}

/// Trains on `split.train`, early-stopping on `split.validation` (or on the
/// training split when the validation split is empty).
pub fn train_with_split(config: &TrainConfig, data: &TrainingData, split: DataSplit) -> Result<TrainedModel> {
    config.validate()?;
    if split.train.is_empty() {
        return invalid("empty training split");
    }
    if split.train.iter().chain(&split.validation).any(|&i| i >= data.len()) {
        return invalid("split index out of range");
    }
    if config.outcome_kind == OutcomeKind::Binary && data.outcome.iter().any(|&y| y != 0.0 && y != 1.0) {
        return invalid("binary outcomes must be 0 or 1");
    }
    let treated = split.train.iter().filter(|&&i| data.treatment[i] == 1).count();
    if treated == 0 || treated == split.train.len() {
        return Err(StedrError::PositivityViolation(format!(
            "training split has {treated} treated of {}",
            split.train.len()
        )));
    }
    let pr_t = treated as f64 / split.train.len() as f64;

    let train_seqs = seqs_of(data, &split.train);
    let scaling = FeatureScaling::fit(&train_seqs);
    let outcome_scale = if config.outcome_kind == OutcomeKind::Continuous && config.standardize_outcome {
        let ys: Vec<f64> = split.train.iter().map(|&i| data.outcome[i]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        let std = var.sqrt();
        OutcomeScale {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    } else {
        OutcomeScale::identity()
    };

    let n_codes = data.n_codes();
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch = Architecture::build(config, n_codes, &mut store, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &store);

    let val_idx = if split.validation.is_empty() {
        split.train.clone()
    } else {
        split.validation.clone()
    };
    let val_batch = EncoderBatch::build(&seqs_of(data, &val_idx), config.max_visits, scaling.as_ref())?;
    let val_labels = labels_of(data, &val_idx, &outcome_scale);

    let mut order = split.train.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = EncoderBatch::build(&seqs_of(data, chunk), config.max_visits, scaling.as_ref())?;
            let labels = labels_of(data, chunk, &outcome_scale);
            let tape = Tape::new();
            let p = store.bind(&tape, true);
            let f = forward(&arch, &p, &batch, None);
            let frozen = freeze(config, pr_t, &f, &labels, Some(&mut rng))?;
            let loss = batch_loss(&arch, config, &p, &f, &labels, &frozen);
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(StedrError::TrainingDiverged {
                    epoch,
                    detail: format!("non-finite training loss {value}"),
                });
            }
            let grads = p.gradients(&tape.backward(loss.total));
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(StedrError::TrainingDiverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            opt.step(&mut store, &grads);
            if !store.all_finite() {
                return Err(StedrError::TrainingDiverged {
                    epoch,
                    detail: "non-finite parameter after update".into(),
                });
            }
            train_sum += value;
        }

        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let f = forward(&arch, &p, &val_batch, None);
        let frozen = freeze(config, pr_t, &f, &val_labels, None)?;
        let loss = batch_loss(&arch, config, &p, &f, &val_labels, &frozen);
        let record = EpochRecord {
            epoch,
            train_loss: train_sum / order.len().div_ceil(config.batch_size) as f64,
            val_loss: loss.total.item(),
            val_factual_mse: loss.factual_mse,
            val_kl: loss.kl.item(),
            val_td: loss.td.item(),
            val_vae: loss.vae.item(),
            val_pnn: loss.pnn.item(),
            val_overlap: loss.overlap.item(),
        };
        history.push(record);
        let watched = match config.monitor {
            Monitor::TotalLoss => record.val_loss,
            Monitor::FactualError => record.val_factual_mse,
        };
        if !watched.is_finite() {
            return Err(StedrError::TrainingDiverged {
                epoch,
                detail: format!("non-finite validation loss {watched}"),
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| watched < *b) {
            best = Some((watched, epoch, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch runs");
    Ok(TrainedModel {
        config: config.clone(),
        n_codes,
        arch,
        store,
        pr_t,
        scaling,
        outcome_scale,
        history,
        best_epoch,
        split,
    })
}
