use super::{estimate_effects, OutcomeKind, TrainedModel, TrainingData};
use crate::error::{invalid, Result};
use crate::metrics::{eps_ate, pehe, variance_stats, MetricsReport};

/// Metrics on the samples `idx` of `data`.
///
/// PEHE and εATE compare effects in model units, so continuous outcomes are
/// scored relative to the training outcome spread. Subgroup variances, the
/// mean effect and the factual error are in raw outcome units.
pub fn evaluate(model: &TrainedModel, data: &TrainingData, idx: &[usize]) -> Result<MetricsReport> {
    if idx.is_empty() {
        return invalid("nothing to evaluate");
    }
    let part = data.subset(idx);
    let est = estimate_effects(model, &part.seqs)?;
    let tau: Vec<f64> = est.iter().map(|e| e.tau_hat).collect();
    let raw: Vec<f64> = tau.iter().map(|&t| model.raw_effect(t)).collect();
    let labels: Vec<usize> = est.iter().map(|e| e.subgroup).collect();
    let (v_within, v_across) = variance_stats(&raw, &labels, model.config.effective_k())?;
    let scale = model.outcome_scale;
    let factual_mse = est
        .iter()
        .zip(part.treatment.iter().zip(&part.outcome))
        .map(|(e, (&t, &y))| {
            let pred = if t == 1 { e.y1_hat } else { e.y0_hat };
            let pred = match model.config.outcome_kind {
                OutcomeKind::Continuous => pred * scale.std + scale.mean,
                OutcomeKind::Binary => pred,
            };
            (pred - y).powi(2)
        })
        .sum::<f64>()
        / est.len() as f64;
    let mut report = MetricsReport {
        n: est.len(),
        v_within: Some(v_within),
        v_across: Some(v_across),
        ate_hat: Some(raw.iter().sum::<f64>() / raw.len() as f64),
        factual_mse: Some(factual_mse),
        ..MetricsReport::default()
    };
    if let Some(truth) = &part.true_effect {
        let truth: Vec<f64> = truth.iter().map(|t| t / scale.std).collect();
        report.pehe = Some(pehe(&tau, &truth)?);
        report.eps_ate = Some(eps_ate(&tau, &truth)?);
        report.units = Some(match model.config.outcome_kind {
            OutcomeKind::Continuous if scale.std != 1.0 => "pehe and eps_ate in training outcome standard deviations".into(),
            _ => "pehe and eps_ate in outcome units".into(),
        });
    }
    Ok(report)
}
