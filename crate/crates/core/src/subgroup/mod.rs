//! Global and subgroup-specific latent Gaussians, the subgroup posterior and
//! the subgroup-network losses.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{invalid, Result, StedrError};
use crate::nn::{Bound, Linear, ParamStore};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Smallest component variance the mixture density accepts.
pub const MIN_VARIANCE: f64 = 1e-12;

/// The target-distribution loss is `KL(q || p)`, not the cross-entropy form.
pub const TARGET_LOSS_IS_KL: bool = true;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupPosterior {
    pub probs: Vec<f64>,
    pub assigned: usize,
}

/// One-layer encoders emit `[mean | log_variance]` side by side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupNetParams {
    pub latent_dim: usize,
    pub global: Linear,
    pub locals: Vec<Linear>,
    pub decoder: Option<Linear>,
}

impl SubgroupNetParams {
    pub fn new(
        store: &mut ParamStore,
        hidden: usize,
        latent_dim: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let global = Linear::new(store, "snn.global", hidden, 2 * latent_dim, rng);
        let locals = (0..k)
            .map(|i| Linear::new(store, &format!("snn.local{i}"), hidden, 2 * latent_dim, rng))
            .collect();
        let decoder = Some(Linear::new(store, "snn.decoder", latent_dim, hidden, rng));
        Self {
            latent_dim,
            global,
            locals,
            decoder,
        }
    }

    /// Global encoder only, for the mixture-free ablation.
    pub fn global_only(
        store: &mut ParamStore,
        hidden: usize,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            latent_dim,
            global: Linear::new(store, "snn.global", hidden, 2 * latent_dim, rng),
            locals: Vec::new(),
            decoder: None,
        }
    }

    pub fn k(&self) -> usize {
        self.locals.len()
    }
}

/// Mean and log-variance of a batch of diagonal Gaussians (`B x p` each).
#[derive(Clone, Copy)]
pub struct GaussianVars<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

fn split<'t>(enc: &Linear, p: &Bound<'t>, xhat: &Var<'t>, latent: usize) -> GaussianVars<'t> {
    let out = enc.forward(p, xhat);
    GaussianVars {
        mean: out.slice_cols(0, latent),
        log_var: out.slice_cols(latent, latent),
    }
}

/// Global and local Gaussians for a batch of representations.
pub fn distribution_vars<'t>(
    params: &SubgroupNetParams,
    p: &Bound<'t>,
    xhat: &Var<'t>,
) -> (GaussianVars<'t>, Vec<GaussianVars<'t>>) {
    let g = split(&params.global, p, xhat, params.latent_dim);
    let locals = params
        .locals
        .iter()
        .map(|l| split(l, p, xhat, params.latent_dim))
        .collect();
    (g, locals)
}

/// `B x K` posterior logits `-||μ_k - μ_g||²`.
pub fn posterior_logits<'t>(global: &GaussianVars<'t>, locals: &[GaussianVars<'t>]) -> Var<'t> {
    let cols: Vec<Var<'t>> = locals
        .iter()
        .map(|l| l.mean.sub(&global.mean).square().sum_cols().neg())
        .collect();
    Var::concat_cols(&cols)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Standard-normal draws for `samples` reparameterized latent samples.
pub fn draw_noise(rng: &mut ChaCha8Rng, samples: usize, n: usize, p: usize) -> Vec<Mat> {
    (0..samples)
        .map(|_| Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal)))
        .collect()
}

/// `z = μ + exp(½ log σ²) ⊙ ε`
pub fn reparameterize<'t>(g: &GaussianVars<'t>, eps: &Mat) -> Var<'t> {
    let tape = g.mean.tape();
    g.mean
        .add(&g.log_var.scale(0.5).exp().mul(&tape.constant(eps.clone())))
}

/// Monte-Carlo `KL(global || Σ_k π_k N_k)` averaged over the batch and the
/// noise draws in `eps`.
pub fn mixture_kl_var<'t>(
    global: &GaussianVars<'t>,
    locals: &[GaussianVars<'t>],
    log_weights: &Var<'t>,
    eps: &[Mat],
) -> Var<'t> {
    let tape = global.mean.tape();
    let mut total: Option<Var<'t>> = None;
    for e in eps {
        let z = reparameterize(global, e);
        let log_p = z.gaussian_log_density(&global.mean, &global.log_var);
        let comps: Vec<Var<'t>> = locals
            .iter()
            .map(|l| z.gaussian_log_density(&l.mean, &l.log_var))
            .collect();
        let log_q = Var::concat_cols(&comps).add(log_weights).logsumexp_rows();
        let term = log_p.sub(&log_q).mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    match total {
        Some(t) => t.scale(1.0 / eps.len() as f64),
        None => tape.scalar(0.0),
    }
}

/// Sharpened, frequency-normalized target distribution for a batch of
/// posteriors, plus the indices of empty subgroups.
pub fn target_distribution(probs: &Mat) -> (Mat, Vec<usize>) {
    let (n, k) = probs.dim();
    let freq: Vec<f64> = (0..k).map(|j| probs.column(j).sum()).collect();
    let empty: Vec<usize> = (0..k).filter(|&j| freq[j] <= 0.0).collect();
    let mut q = Array2::zeros((n, k));
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            if freq[j] > 0.0 {
                let v = probs[[i, j]] * probs[[i, j]] / freq[j];
                q[[i, j]] = v;
                s += v;
            }
        }
        if s > 0.0 {
            for j in 0..k {
                q[[i, j]] /= s;
            }
        }
    }
    (q, empty)
}

/// Batch sum of `Σ_k q (log q - log p)` with `q` held constant.
pub fn target_kl_var<'t>(q: &Mat, log_probs: &Var<'t>) -> Var<'t> {
    let tape = log_probs.tape();
    let neg_entropy: f64 = q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let cross = log_probs.mul(&tape.constant(q.clone())).sum_all();
    cross.neg().add_scalar(neg_entropy)
}

/// Batch mean of `½ ||decoder(z) - x̂||²`.
pub fn reconstruction_var<'t>(decoder: &Linear, p: &Bound<'t>, z: &Var<'t>, xhat: &Var<'t>) -> Var<'t> {
    let n = xhat.shape().0.max(1) as f64;
    decoder
        .forward(p, z)
        .sub(xhat)
        .square()
        .sum_all()
        .scale(0.5 / n)
}

/// Subgroup-network loss terms on the tape.
pub struct SnnTerms<'t> {
    pub kl: Var<'t>,
    pub td: Var<'t>,
    pub vae: Var<'t>,
}

impl<'t> SnnTerms<'t> {
    pub fn total(&self) -> Var<'t> {
        self.kl.add(&self.td).add(&self.vae)
    }
}

/// All three subgroup-network losses; `eps[0]` also drives the reconstruction sample.
pub fn snn_terms<'t>(
    params: &SubgroupNetParams,
    p: &Bound<'t>,
    xhat: &Var<'t>,
    global: &GaussianVars<'t>,
    locals: &[GaussianVars<'t>],
    log_probs: &Var<'t>,
    target: &Mat,
    eps: &[Mat],
) -> SnnTerms<'t> {
    let kl = mixture_kl_var(global, locals, log_probs, eps);
    let td = target_kl_var(target, log_probs);
    let vae = match (&params.decoder, eps.first()) {
        (Some(dec), Some(e)) => reconstruction_var(dec, p, &reparameterize(global, e), xhat),
        _ => xhat.tape().scalar(0.0),
    };
    SnnTerms { kl, td, vae }
}

fn gaussian_rows(mean: &Mat, lv: &Mat, i: usize) -> GaussianParams {
    GaussianParams {
        mean: mean.row(i).to_vec(),
        log_variance: lv.row(i).to_vec(),
    }
}

/// Global and local Gaussians of one representation.
pub fn encode_distributions(
    store: &ParamStore,
    params: &SubgroupNetParams,
    xhat: &[f64],
) -> Result<(GaussianParams, Vec<GaussianParams>)> {
    if xhat.iter().any(|v| !v.is_finite()) {
        return invalid("representation contains non-finite values");
    }
    let h = store.value(params.global.weight).nrows();
    if xhat.len() != h {
        return invalid(format!("representation has width {}, expected {h}", xhat.len()));
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Array2::from_shape_vec((1, h), xhat.to_vec()).expect("shape"));
    let (g, locals) = distribution_vars(params, &p, &x);
    let out = |v: &GaussianVars| gaussian_rows(&v.mean.value(), &v.log_var.value(), 0);
    Ok((out(&g), locals.iter().map(out).collect()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn subgroup_posterior(global: &GaussianParams, locals: &[GaussianParams]) -> SubgroupPosterior {
    let logits: Vec<f64> = locals
        .iter()
        .map(|l| -sq_dist(&l.mean, &global.mean))
        .collect();
    let probs = softmax(&logits);
    let mut assigned = 0;
    for (k, &v) in probs.iter().enumerate() {
        if v > probs[assigned] {
            assigned = k;
        }
    }
    SubgroupPosterior { probs, assigned }
}

fn log_density(z: &[f64], g: &GaussianParams) -> f64 {
    let mut acc = 0.0;
    for ((&zj, &m), &lv) in z.iter().zip(&g.mean).zip(&g.log_variance) {
        acc += std::f64::consts::LN_2 + std::f64::consts::PI.ln() + lv + (zj - m).powi(2) * (-lv).exp();
    }
    -0.5 * acc
}

/// Monte-Carlo estimate of `KL(global || Σ_k probs[k] N_k)`.
pub fn mixture_kl_loss(
    global: &GaussianParams,
    locals: &[GaussianParams],
    posterior: &SubgroupPosterior,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if mc_samples == 0 {
        return invalid("mc_samples must be at least 1");
    }
    if locals.is_empty() || posterior.probs.len() != locals.len() {
        return invalid("posterior and local Gaussians disagree on K");
    }
    let p = global.mean.len();
    for g in std::iter::once(global).chain(locals) {
        if g.mean.len() != p || g.log_variance.len() != p {
            return invalid("Gaussians must share one dimension");
        }
        if g.log_variance.iter().any(|v| !v.is_finite()) {
            return Err(StedrError::NumericDomain("non-finite log-variance".into()));
        }
    }
    if locals
        .iter()
        .flat_map(|g| &g.log_variance)
        .any(|&lv| lv.exp() <= MIN_VARIANCE)
    {
        return Err(StedrError::NumericDomain(format!(
            "mixture component variance at or below {MIN_VARIANCE}"
        )));
    }
    let log_w: Vec<f64> = posterior.probs.iter().map(|w| w.ln()).collect();
    let sd: Vec<f64> = global.log_variance.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut total = 0.0;
    let mut z = vec![0.0; p];
    for _ in 0..mc_samples {
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            z[j] = global.mean[j] + sd[j] * e;
        }
        let log_p = log_density(&z, global);
        let terms: Vec<f64> = locals
            .iter()
            .zip(&log_w)
            .map(|(l, w)| w + log_density(&z, l))
            .collect();
        let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_q = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        total += log_p - log_q;
    }
    Ok(total / mc_samples as f64)
}

/// Target distribution of a batch of posteriors and the batch-mean `KL(q || p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub q: Mat,
    pub loss: f64,
    pub empty_subgroups: Vec<usize>,
}

pub fn target_distribution_loss(batch_probs: &Mat) -> Result<TargetDistribution> {
    if batch_probs.nrows() == 0 {
        return invalid("empty batch");
    }
    for row in batch_probs.rows() {
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.sum() - 1.0).abs() > 1e-6 {
            return invalid("posterior rows must lie on the simplex");
        }
    }
    let (q, empty_subgroups) = target_distribution(batch_probs);
    let mut loss = 0.0;
    for (qv, pv) in q.iter().zip(batch_probs.iter()) {
        if *qv > 0.0 {
            loss += qv * (qv.ln() - pv.ln());
        }
    }
    Ok(TargetDistribution {
        q,
        loss,
        empty_subgroups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnnLoss {
    pub total: f64,
    pub kl: f64,
    pub td: f64,
    pub vae: f64,
}

/// Subgroup-network loss of a batch of representations (`B x h`).
pub fn snn_loss(
    store: &ParamStore,
    params: &SubgroupNetParams,
    xhat: &Mat,
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SnnLoss> {
    if xhat.nrows() == 0 {
        return invalid("empty batch");
    }
    if params.locals.is_empty() {
        return invalid("subgroup loss needs at least one local encoder");
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(xhat.clone());
    let (g, locals) = distribution_vars(params, &p, &x);
    if locals
        .iter()
        .any(|l| l.log_var.value().iter().any(|&lv| lv.exp() <= MIN_VARIANCE))
    {
        return Err(StedrError::NumericDomain(format!(
            "mixture component variance at or below {MIN_VARIANCE}"
        )));
    }
    let log_probs = posterior_logits(&g, &locals).log_softmax_rows();
    let (q, _) = target_distribution(&log_probs.value().mapv(f64::exp));
    let eps = draw_noise(rng, mc_samples.max(1), xhat.nrows(), params.latent_dim);
    let terms = snn_terms(params, &p, &x, &g, &locals, &log_probs, &q, &eps);
    let (kl, td, vae) = (terms.kl.item(), terms.td.item(), terms.vae.item());
    Ok(SnnLoss {
        total: terms.total().item(),
        kl,
        td,
        vae,
    })
}
