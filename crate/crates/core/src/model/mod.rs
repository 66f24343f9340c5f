//! Prediction network: outcome, propensity and subgroup heads on top of the
//! encoder and subgroup network, the weighted training objective, and
//! effect estimation.

mod checkpoint;
mod config;
mod evaluate;
mod overlap;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use evaluate::evaluate;
pub use config::{IptwMode, Monitor, OutcomeKind, TrainConfig};
pub use overlap::{interval_overlap, overlap_penalty, subgroup_intervals, SubgroupInterval};
pub use train::{train, train_with_split, DataSplit, EpochRecord, TrainingData};

use crate::autograd::{Mat, Tape, Var};
use crate::encoder::{encode_batch, EncoderBatch, EncoderParams, EncoderShape, FeatureScaling, VisitSequence};
use crate::error::{invalid, Result, StedrError};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::subgroup::{
    argmax_rows, distribution_vars, draw_noise, posterior_logits, snn_terms, target_distribution,
    GaussianVars, SubgroupNetParams,
};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rows per forward pass when scoring.
const SCORE_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionParams {
    pub y0: Mlp,
    pub y1: Mlp,
    pub t: Mlp,
    /// Absent in the mixture-free ablation.
    pub k: Option<Mlp>,
}

/// Parameter layout of a full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderParams,
    pub subgroup: SubgroupNetParams,
    pub heads: PredictionParams,
}

impl Architecture {
    /// Lays out and initializes every parameter. Names and order depend only
    /// on `config` and `n_codes`.
    pub fn build(config: &TrainConfig, n_codes: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let shape = EncoderShape {
            n_codes,
            max_visits: config.max_visits,
            embed_dim: config.embed_dim,
            hidden: config.hidden,
            layers: config.transformer_layers,
            heads: config.heads,
            ablate_attention: config.ablate_attention,
        };
        let encoder = EncoderParams::new(store, shape, rng);
        let (h, p) = (config.hidden, config.latent_dim);
        let subgroup = if config.ablate_gmm {
            SubgroupNetParams::global_only(store, h, p, rng)
        } else {
            SubgroupNetParams::new(store, h, p, config.k, rng)
        };
        let head = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
            Mlp::new(store, name, p, config.hidden, config.head_layers, out, rng)
        };
        let heads = PredictionParams {
            y0: head(store, "head.y0", 1, rng),
            y1: head(store, "head.y1", 1, rng),
            t: head(store, "head.t", 1, rng),
            k: (!config.ablate_gmm).then(|| head(store, "head.k", config.k, rng)),
        };
        Self {
            encoder,
            subgroup,
            heads,
        }
    }
}

/// Per-sample output of the prediction network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub tau_hat: f64,
    pub subgroup: usize,
    pub y0_hat: f64,
    pub y1_hat: f64,
    pub t_hat: f64,
}

/// Training-time constants of one batch: subgroup labels, target
/// distribution, IPTW weights and latent noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub assigned: Vec<usize>,
    pub target: Option<Mat>,
    pub weights: Vec<f64>,
    pub noise: Vec<Mat>,
}

/// Forward values of a batch on the tape.
pub struct ForwardVars<'t> {
    pub xhat: Var<'t>,
    pub global: GaussianVars<'t>,
    pub locals: Vec<GaussianVars<'t>>,
    pub log_posterior: Option<Var<'t>>,
    pub assigned: Vec<usize>,
    pub y0: Var<'t>,
    pub y1: Var<'t>,
    pub t_logit: Var<'t>,
    pub k_logits: Option<Var<'t>>,
    pub code_attention: Option<Var<'t>>,
}

/// Encoder, subgroup network and heads. `assigned` overrides the argmax
/// subgroup when given.
pub fn forward<'t>(
    arch: &Architecture,
    p: &Bound<'t>,
    batch: &EncoderBatch,
    assigned: Option<&[usize]>,
) -> ForwardVars<'t> {
    let enc = encode_batch(&arch.encoder, p, batch);
    let (global, locals) = distribution_vars(&arch.subgroup, p, &enc.xhat);
    let (log_posterior, assigned, rep) = if locals.is_empty() {
        (None, vec![0; batch.n_samples()], global.mean)
    } else {
        let lp = posterior_logits(&global, &locals).log_softmax_rows();
        let assigned = match assigned {
            Some(a) => a.to_vec(),
            None => argmax_rows(&lp.value()),
        };
        let means: Vec<Var<'t>> = locals.iter().map(|l| l.mean).collect();
        let rep = Var::choose_rows(&means, &assigned);
        (Some(lp), assigned, rep)
    };
    let heads = &arch.heads;
    ForwardVars {
        xhat: enc.xhat,
        global,
        locals,
        log_posterior,
        assigned,
        y0: heads.y0.forward(p, &rep),
        y1: heads.y1.forward(p, &rep),
        t_logit: heads.t.forward(p, &rep),
        k_logits: heads.k.as_ref().map(|h| h.forward(p, &rep)),
        code_attention: enc.code_attention,
    }
}

/// Propensity clipped into `[clip, 1 - clip]`.
pub fn clip_propensity(t: f64, clip: f64) -> f64 {
    t.clamp(clip, 1.0 - clip)
}

/// Inverse-probability-of-treatment weights from clipped propensities.
pub fn iptw_weights(
    t_hat: &[f64],
    treatment: &[u8],
    pr_t: f64,
    mode: IptwMode,
    clip: f64,
) -> Result<Vec<f64>> {
    if !(pr_t > 0.0 && pr_t < 1.0) {
        return Err(StedrError::PositivityViolation(format!(
            "treated fraction {pr_t} outside (0, 1)"
        )));
    }
    if !(clip > 0.0 && clip < 0.5) {
        return invalid(format!("propensity clip {clip} outside (0, 0.5)"));
    }
    if mode == IptwMode::TreatmentConditional && treatment.len() != t_hat.len() {
        return invalid("treatment vector length differs from propensities");
    }
    Ok(t_hat
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let t = clip_propensity(t, clip);
            match mode {
                IptwMode::LiteralSum => pr_t / t + (1.0 - pr_t) / (1.0 - t),
                IptwMode::TreatmentConditional => {
                    if treatment[i] == 1 {
                        pr_t / t
                    } else {
                        (1.0 - pr_t) / (1.0 - t)
                    }
                }
            }
        })
        .collect())
}

/// Treatment and outcome of the samples in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
}

/// Loss terms of one batch on the tape.
pub struct LossVars<'t> {
    pub kl: Var<'t>,
    pub td: Var<'t>,
    pub vae: Var<'t>,
    pub snn: Var<'t>,
    pub propensity: Var<'t>,
    pub subgroup_ce: Var<'t>,
    pub outcome: Var<'t>,
    pub pnn: Var<'t>,
    pub overlap: Var<'t>,
    pub total: Var<'t>,
    /// Mean squared factual error in model units, unweighted.
    pub factual_mse: f64,
}

/// Estimated effects on the tape: outcome-head difference, in probability
/// units for binary outcomes.
fn tau_var<'t>(config: &TrainConfig, f: &ForwardVars<'t>) -> Var<'t> {
    match config.outcome_kind {
        OutcomeKind::Continuous => f.y1.sub(&f.y0),
        OutcomeKind::Binary => f.y1.sigmoid().sub(&f.y0.sigmoid()),
    }
}

/// Propensity, subgroup and weighted outcome losses, each summed over the batch.
pub fn pnn_terms<'t>(
    config: &TrainConfig,
    f: &ForwardVars<'t>,
    labels: &BatchLabels,
    weights: &[f64],
) -> (Var<'t>, Var<'t>, Var<'t>, f64) {
    let tape = f.y0.tape();
    let n = labels.treatment.len();
    let t: Vec<f64> = labels.treatment.iter().map(|&v| f64::from(v)).collect();
    let propensity = f.t_logit.bce_with_logits(&t).sum_all();
    let subgroup_ce = match &f.k_logits {
        Some(k) => k.log_softmax_rows().select_cols(&f.assigned).sum_all().neg(),
        None => tape.scalar(0.0),
    };
    let t_col = tape.constant(Array2::from_shape_vec((n, 1), t.clone()).expect("shape"));
    let c_col = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| 1.0 - t[i]));
    let factual = f.y0.mul(&c_col).add(&f.y1.mul(&t_col));
    let per_row = match config.outcome_kind {
        OutcomeKind::Continuous => {
            let y = tape.constant(Array2::from_shape_vec((n, 1), labels.outcome.clone()).expect("shape"));
            factual.sub(&y).square()
        }
        OutcomeKind::Binary => factual.bce_with_logits(&labels.outcome),
    };
    let factual_mse = {
        let fv = factual.value();
        let pred: Vec<f64> = match config.outcome_kind {
            OutcomeKind::Continuous => fv.column(0).to_vec(),
            OutcomeKind::Binary => fv.column(0).iter().map(|&v| crate::data::logistic(v)).collect(),
        };
        pred.iter()
            .zip(&labels.outcome)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n as f64
    };
    let w = tape.constant(Array2::from_shape_vec((n, 1), weights.to_vec()).expect("shape"));
    let outcome = per_row.mul(&w).sum_all();
    (propensity, subgroup_ce, outcome, factual_mse)
}

/// Computes every constant the batch objective needs from the forward
/// values. With `rng` absent the latent noise is zero.
pub fn freeze(
    config: &TrainConfig,
    pr_t: f64,
    f: &ForwardVars,
    labels: &BatchLabels,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Frozen> {
    let n = labels.treatment.len();
    let p = f.global.mean.shape().1;
    let t_hat: Vec<f64> = f
        .t_logit
        .value()
        .column(0)
        .iter()
        .map(|&v| crate::data::logistic(v))
        .collect();
    let weights = iptw_weights(&t_hat, &labels.treatment, pr_t, config.iptw_mode, config.propensity_clip)?;
    let target = f
        .log_posterior
        .as_ref()
        .map(|lp| target_distribution(&lp.value().mapv(f64::exp)).0);
    let noise = match rng {
        Some(rng) => draw_noise(rng, config.mc_samples, n, p),
        None => vec![Array2::zeros((n, p))],
    };
    Ok(Frozen {
        assigned: f.assigned.clone(),
        target,
        weights,
        noise,
    })
}

/// Total objective `L_snn + L_pnn + L_overlap` of a batch under `frozen`.
pub fn batch_loss<'t>(
    arch: &Architecture,
    config: &TrainConfig,
    p: &Bound<'t>,
    f: &ForwardVars<'t>,
    labels: &BatchLabels,
    frozen: &Frozen,
) -> LossVars<'t> {
    let tape = f.y0.tape();
    let (kl, td, vae) = match (&f.log_posterior, &frozen.target) {
        (Some(lp), Some(q)) => {
            let t = snn_terms(&arch.subgroup, p, &f.xhat, &f.global, &f.locals, lp, q, &frozen.noise);
            (t.kl, t.td, t.vae)
        }
        _ => (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0)),
    };
    let snn = kl.add(&td).add(&vae);
    let (propensity, subgroup_ce, outcome, factual_mse) = pnn_terms(config, f, labels, &frozen.weights);
    let pnn = propensity.add(&subgroup_ce).add(&outcome);
    let overlap = overlap::overlap_var(&tau_var(config, f), &frozen.assigned, config.effective_k(), config.alpha);
    let total = snn.add(&pnn).add(&overlap);
    LossVars {
        kl,
        td,
        vae,
        snn,
        propensity,
        subgroup_ce,
        outcome,
        pnn,
        overlap,
        total,
        factual_mse,
    }
}

/// Outcome standardization fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub mean: f64,
    pub std: f64,
}

impl OutcomeScale {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn to_model(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }
}

/// A trained model with everything needed to score new patients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub n_codes: usize,
    pub arch: Architecture,
    pub store: ParamStore,
    /// Treated fraction of the training split.
    pub pr_t: f64,
    pub scaling: Option<FeatureScaling>,
    pub outcome_scale: OutcomeScale,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub split: DataSplit,
}

impl TrainedModel {
    /// Effect in original outcome units.
    pub fn raw_effect(&self, tau: f64) -> f64 {
        tau * self.outcome_scale.std
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }

    fn batches<'a>(&self, seqs: &'a [VisitSequence]) -> impl Iterator<Item = Result<(usize, EncoderBatch)>> + 'a {
        let max_visits = self.config.max_visits;
        let scaling = self.scaling.clone();
        seqs.chunks(SCORE_BATCH).enumerate().map(move |(c, chunk)| {
            EncoderBatch::build(chunk, max_visits, scaling.as_ref()).map(|b| (c * SCORE_BATCH, b))
        })
    }

    fn check(&self, seqs: &[VisitSequence]) -> Result<()> {
        for s in seqs {
            s.validate()?;
            if s.n_codes != self.n_codes {
                return invalid(format!("sequence has {} codes, model expects {}", s.n_codes, self.n_codes));
            }
        }
        Ok(())
    }

    /// Covariate attention per patient (`n x M`), `None` if attention is ablated.
    pub fn code_attention(&self, seqs: &[VisitSequence]) -> Result<Option<Array2<f64>>> {
        self.check(seqs)?;
        if self.arch.encoder.attention.is_none() {
            return Ok(None);
        }
        let m = self.n_codes;
        let mut out = Array2::zeros((seqs.len(), m));
        for item in self.batches(seqs) {
            let (start, batch) = item?;
            let tape = Tape::new();
            let p = self.store.bind(&tape, false);
            let att = self.arch.encoder.attention.as_ref().expect("checked above");
            let (a_d, _) = crate::encoder::attention_vars(att, &p, &batch);
            let a_d = a_d.value();
            for b in 0..batch.n_samples() {
                for c in 0..m {
                    out[[start + b, c]] = a_d[[b * m + c, 0]];
                }
            }
        }
        Ok(Some(out))
    }
}

/// Deterministic per-sample estimates; outcomes and effects are in model
/// units (standardized for continuous outcomes, probabilities for binary).
pub fn estimate_effects(model: &TrainedModel, seqs: &[VisitSequence]) -> Result<Vec<EffectEstimate>> {
    model.check(seqs)?;
    let mut out = Vec::with_capacity(seqs.len());
    for item in model.batches(seqs) {
        let (_, batch) = item?;
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        let f = forward(&model.arch, &p, &batch, None);
        let (y0, y1, t) = (f.y0.value(), f.y1.value(), f.t_logit.value());
        for i in 0..batch.n_samples() {
            let (a, b) = match model.config.outcome_kind {
                OutcomeKind::Continuous => (y0[[i, 0]], y1[[i, 0]]),
                OutcomeKind::Binary => (crate::data::logistic(y0[[i, 0]]), crate::data::logistic(y1[[i, 0]])),
            };
            out.push(EffectEstimate {
                tau_hat: b - a,
                subgroup: f.assigned[i],
                y0_hat: a,
                y1_hat: b,
                t_hat: clip_propensity(crate::data::logistic(t[[i, 0]]), model.config.propensity_clip),
            });
        }
    }
    Ok(out)
}

/// Heads-only view of one representation: `forward_heads` for a single
/// encoded patient.
pub fn forward_heads(model: &TrainedModel, xhat: &[f64]) -> Result<EffectEstimate> {
    let h = model.config.hidden;
    if xhat.len() != h || xhat.iter().any(|v| !v.is_finite()) {
        return invalid(format!("representation must be {h} finite values"));
    }
    let tape = Tape::new();
    let p = model.store.bind(&tape, false);
    let x = tape.constant(Array2::from_shape_vec((1, h), xhat.to_vec()).expect("shape"));
    let (global, locals) = distribution_vars(&model.arch.subgroup, &p, &x);
    let (assigned, rep) = if locals.is_empty() {
        (0, global.mean)
    } else {
        let k = argmax_rows(&posterior_logits(&global, &locals).value())[0];
        (k, locals[k].mean)
    };
    let heads = &model.arch.heads;
    let y0 = heads.y0.forward(&p, &rep).item();
    let y1 = heads.y1.forward(&p, &rep).item();
    let t = heads.t.forward(&p, &rep).item();
    let (a, b) = match model.config.outcome_kind {
        OutcomeKind::Continuous => (y0, y1),
        OutcomeKind::Binary => (crate::data::logistic(y0), crate::data::logistic(y1)),
    };
    Ok(EffectEstimate {
        tau_hat: b - a,
        subgroup: assigned,
        y0_hat: a,
        y1_hat: b,
        t_hat: clip_propensity(crate::data::logistic(t), model.config.propensity_clip),
    })
}

#[cfg(test)]
mod tests;
