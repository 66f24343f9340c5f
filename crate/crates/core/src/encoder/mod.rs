//! Patient encoder: covariate-level and visit-level attention over a visit
//! history, followed by a transformer and masked mean pooling.

mod batch;
mod sequence;

pub use batch::{EncoderBatch, FeatureScaling};
pub use sequence::VisitSequence;

use crate::autograd::{Segments, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Days per unit of the time-embedding input.
pub const DAYS_PER_TIME_UNIT: f64 = 365.0;
const LN_EPS: f64 = 1e-5;

/// Shape constants of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub n_codes: usize,
    pub max_visits: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ablate_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `(M * T_max) x p`: block `m` is the occurrence-vector map of code `m`.
    pub code_weight: ParamId,
    /// `M x p`
    pub code_bias: ParamId,
    pub time: Linear,
    pub visit: Linear,
    /// `p x 1`
    pub code_query: ParamId,
    /// `p x 1`
    pub visit_query: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    /// Absent when attention is ablated.
    pub attention: Option<AttentionParams>,
    pub input: Linear,
    pub layers: Vec<TransformerLayer>,
}

/// Covariate attention, visit attention and their outer product for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub a_d: Vec<f64>,
    /// One entry per visit of the sequence, zero for masked visits.
    pub a_v: Vec<f64>,
    /// `T x M`, `a_v[t] * a_d[m]`.
    pub matrix: Array2<f64>,
}

impl AttentionScores {
    pub fn from_parts(a_d: Vec<f64>, a_v: Vec<f64>) -> Self {
        let matrix = Array2::from_shape_fn((a_v.len(), a_d.len()), |(t, m)| a_v[t] * a_d[m]);
        Self { a_d, a_v, matrix }
    }

    /// Uniform attention over the valid visits of `seq`; combined with the
    /// internal rescaling this is the all-ones attention matrix.
    pub fn uniform(seq: &VisitSequence) -> Self {
        let m = seq.n_codes;
        let nv = seq.n_valid().max(1) as f64;
        let a_v = seq
            .valid
            .iter()
            .map(|&v| if v { 1.0 / nv } else { 0.0 })
            .collect();
        Self::from_parts(vec![1.0 / m as f64; m], a_v)
    }
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, shape: EncoderShape, rng: &mut ChaCha8Rng) -> Self {
        let EncoderShape {
            n_codes: m,
            max_visits: tm,
            embed_dim: p,
            hidden: h,
            layers,
            heads,
            ablate_attention,
        } = shape;
        assert!(heads > 0 && h % heads == 0, "hidden width must divide into heads");
        let attention = (!ablate_attention).then(|| AttentionParams {
            code_weight: store.add_glorot("enc.code.weight", m * tm, p, rng),
            code_bias: store.add_zeros("enc.code.bias", m, p),
            time: Linear::new(store, "enc.time", tm, p, rng),
            visit: Linear::new(store, "enc.visit", m, p, rng),
            code_query: store.add_glorot("enc.code_query", p, 1, rng),
            visit_query: store.add_glorot("enc.visit_query", p, 1, rng),
        });
        let input = Linear::new(store, "enc.input", m, h, rng);
        let layers = (0..layers)
            .map(|l| {
                let name = format!("enc.tf{l}");
                TransformerLayer {
                    query: Linear::new(store, &format!("{name}.q"), h, h, rng),
                    key: Linear::new(store, &format!("{name}.k"), h, h, rng),
                    value: Linear::new(store, &format!("{name}.v"), h, h, rng),
                    output: Linear::new(store, &format!("{name}.o"), h, h, rng),
                    norm1: (
                        store.add_filled(format!("{name}.ln1.gain"), 1, h, 1.0),
                        store.add_zeros(format!("{name}.ln1.bias"), 1, h),
                    ),
                    ff1: Linear::new(store, &format!("{name}.ff1"), h, h, rng),
                    ff2: Linear::new(store, &format!("{name}.ff2"), h, h, rng),
                    norm2: (
                        store.add_filled(format!("{name}.ln2.gain"), 1, h, 1.0),
                        store.add_zeros(format!("{name}.ln2.bias"), 1, h),
                    ),
                }
            })
            .collect();
        Self {
            shape,
            attention,
            input,
            layers,
        }
    }
}

/// Tape outputs of the encoder for one batch.
pub struct Encoded<'t> {
    /// `B x h` pooled representations.
    pub xhat: Var<'t>,
    /// `(B * M) x 1`, present unless attention is ablated.
    pub code_attention: Option<Var<'t>>,
    /// `rows x 1` over the kept visits.
    pub visit_attention: Option<Var<'t>>,
}

/// Covariate and visit attention on the tape.
pub fn attention_vars<'t>(
    att: &AttentionParams,
    p: &Bound<'t>,
    batch: &EncoderBatch,
) -> (Var<'t>, Var<'t>) {
    let code_emb = p
        .get(att.code_weight)
        .sparse_left_mul(&batch.code_occurrence)
        .add(&p.get(att.code_bias).sparse_left_mul(&batch.code_identity));
    let time_emb = att.time.forward_sparse(p, &batch.time_input);
    let code_seg = Rc::new(Segments::uniform(batch.n_samples(), batch.n_codes));
    let e = code_emb.add(&time_emb.repeat_segments(&code_seg));
    let a_d = e.matmul(&p.get(att.code_query)).segment_softmax(&code_seg);
    let v = att.visit.forward_sparse(p, &batch.visit_codes);
    let a_v = v
        .matmul(&p.get(att.visit_query))
        .segment_softmax(&batch.segments);
    (a_d, a_v)
}

/// Projection of the (attended) visit matrix, transformer and pooling.
fn transform<'t>(
    params: &EncoderParams,
    p: &Bound<'t>,
    batch: &EncoderBatch,
    attention: Option<(Var<'t>, Var<'t>)>,
) -> Var<'t> {
    let tape = p.get(params.input.weight).tape();
    let w_in = p.get(params.input.weight);
    let projected = match attention {
        Some((a_d, a_v)) => {
            // Rescaled so that uniform attention multiplies every entry by one.
            let a_d = a_d.scale(batch.n_codes as f64);
            let a_v = a_v.mul(&tape.constant(batch.visit_counts.clone()));
            w_in.attended_projection(&a_v, &a_d, &batch.visit_codes, &batch.segments)
        }
        None => w_in.sparse_left_mul(&batch.visit_codes),
    };
    let mut x = projected.add_row(&p.get(params.input.bias)).relu();
    for layer in &params.layers {
        let q = layer.query.forward(p, &x);
        let k = layer.key.forward(p, &x);
        let v = layer.value.forward(p, &x);
        let att = q.segment_self_attention(&k, &v, &batch.segments, params.shape.heads);
        let att = layer.output.forward(p, &att);
        x = x
            .add(&att)
            .layer_norm(&p.get(layer.norm1.0), &p.get(layer.norm1.1), LN_EPS);
        let ff = layer.ff2.forward(p, &layer.ff1.forward(p, &x).relu());
        x = x
            .add(&ff)
            .layer_norm(&p.get(layer.norm2.0), &p.get(layer.norm2.1), LN_EPS);
    }
    x.segment_mean(&batch.segments)
}

/// Full encoder forward for a batch; attention is computed from the inputs.
pub fn encode_batch<'t>(params: &EncoderParams, p: &Bound<'t>, batch: &EncoderBatch) -> Encoded<'t> {
    match &params.attention {
        Some(att) => {
            let (a_d, a_v) = attention_vars(att, p, batch);
            let xhat = transform(params, p, batch, Some((a_d, a_v)));
            Encoded {
                xhat,
                code_attention: Some(a_d),
                visit_attention: Some(a_v),
            }
        }
        None => Encoded {
            xhat: transform(params, p, batch, None),
            code_attention: None,
            visit_attention: None,
        },
    }
}

fn check_shape(params: &EncoderParams, seq: &VisitSequence) -> Result<()> {
    seq.validate()?;
    if seq.n_codes != params.shape.n_codes {
        return invalid(format!(
            "sequence has {} codes, encoder expects {}",
            seq.n_codes, params.shape.n_codes
        ));
    }
    Ok(())
}

/// Attention scores of one patient.
pub fn attention_scores(
    store: &ParamStore,
    params: &EncoderParams,
    seq: &VisitSequence,
    scaling: Option<&FeatureScaling>,
) -> Result<AttentionScores> {
    check_shape(params, seq)?;
    let Some(att) = &params.attention else {
        return invalid("attention scores requested from an attention-ablated encoder");
    };
    let batch = EncoderBatch::build(std::slice::from_ref(seq), params.shape.max_visits, scaling)?;
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let (a_d, a_v) = attention_vars(att, &p, &batch);
    let a_d = a_d.value().column(0).to_vec();
    let kept = a_v.value().column(0).to_vec();
    let mut a_v = vec![0.0; seq.len()];
    for (row, &t) in batch.kept_visits[0].iter().enumerate() {
        a_v[t] = kept[row];
    }
    Ok(AttentionScores::from_parts(a_d, a_v))
}

/// Representation of one patient under the given attention scores.
pub fn encode(
    store: &ParamStore,
    params: &EncoderParams,
    seq: &VisitSequence,
    attn: &AttentionScores,
    scaling: Option<&FeatureScaling>,
) -> Result<Vec<f64>> {
    check_shape(params, seq)?;
    if attn.a_d.len() != seq.n_codes || attn.a_v.len() != seq.len() {
        return invalid("attention scores do not match the sequence shape");
    }
    let batch = EncoderBatch::build(std::slice::from_ref(seq), params.shape.max_visits, scaling)?;
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let a_d = tape.constant(Array2::from_shape_vec((seq.n_codes, 1), attn.a_d.clone()).expect("shape"));
    let kept: Vec<f64> = batch.kept_visits[0].iter().map(|&t| attn.a_v[t]).collect();
    let a_v = tape.constant(Array2::from_shape_vec((kept.len(), 1), kept).expect("shape"));
    let xhat = transform(params, &p, &batch, Some((a_d, a_v)));
    let out = xhat.value().row(0).to_vec();
    Ok(out)
}

/// Representations of many patients with the encoder's own attention (or
/// none, if ablated), one row per patient.
pub fn encode_all(
    store: &ParamStore,
    params: &EncoderParams,
    seqs: &[VisitSequence],
    scaling: Option<&FeatureScaling>,
) -> Result<Array2<f64>> {
    for s in seqs {
        check_shape(params, s)?;
    }
    let batch = EncoderBatch::build(seqs, params.shape.max_visits, scaling)?;
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let enc = encode_batch(params, &p, &batch);
    let out = (*enc.xhat.value()).clone();
    Ok(out)
}

impl Linear {
    /// `S W + b` for a constant sparse input `S`.
    pub fn forward_sparse<'t>(
        &self,
        p: &Bound<'t>,
        x: &Rc<crate::autograd::SparseEntries>,
    ) -> Var<'t> {
        p.get(self.weight)
            .sparse_left_mul(x)
            .add_row(&p.get(self.bias))
    }
}
