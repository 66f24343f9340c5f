//! Relative covariate importance per subgroup from input attention.

use crate::encoder::VisitSequence;
use crate::error::{invalid, Result};
use crate::model::{estimate_effects, TrainedModel};
use serde::{Deserialize, Serialize};

/// `scores[c][k]`: share of covariate `c`'s average attention that falls in
/// subgroup `k`. Absent subgroups are `None` and excluded from the shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTable {
    pub k: usize,
    pub subgroup_sizes: Vec<usize>,
    pub scores: Vec<Vec<Option<f64>>>,
}

impl AttentionTable {
    /// Covariates whose share in subgroup `k` exceeds the uniform `1 / K`.
    pub fn important(&self, k: usize) -> Vec<usize> {
        let cut = 1.0 / self.k as f64;
        (0..self.scores.len())
            .filter(|&c| self.scores[c].get(k).copied().flatten().is_some_and(|s| s > cut))
            .collect()
    }
}

/// Normalizes per-subgroup average scores (`averages[c][k]`) across
/// subgroups. `None` marks a subgroup without members.
pub fn normalize_rows(averages: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    averages
        .iter()
        .map(|row| {
            let present = row.iter().flatten().count();
            let total: f64 = row.iter().flatten().sum();
            row.iter()
                .map(|v| {
                    v.map(|v| {
                        if total > 0.0 {
                            v / total
                        } else {
                            1.0 / present as f64
                        }
                    })
                })
                .collect()
        })
        .collect()
}

/// Averages each patient's covariate attention within their assigned
/// subgroup, then normalizes every covariate row across subgroups.
pub fn attention_summary(model: &TrainedModel, cohort: &[VisitSequence], k: usize) -> Result<AttentionTable> {
    if cohort.is_empty() {
        return invalid("empty cohort");
    }
    if k == 0 || k < model.config.effective_k() {
        return invalid(format!("k = {k} is smaller than the model's subgroup count"));
    }
    let Some(att) = model.code_attention(cohort)? else {
        return invalid("model was trained without input attention");
    };
    let assigned: Vec<usize> = estimate_effects(model, cohort)?.iter().map(|e| e.subgroup).collect();
    let m = att.ncols();
    let mut sums = vec![vec![0.0; k]; m];
    let mut sizes = vec![0usize; k];
    for (i, &g) in assigned.iter().enumerate() {
        sizes[g] += 1;
        for c in 0..m {
            sums[c][g] += att[[i, c]];
        }
    }
    let averages: Vec<Vec<Option<f64>>> = sums
        .iter()
        .map(|row| {
            row.iter()
                .zip(&sizes)
                .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                .collect()
        })
        .collect();
    Ok(AttentionTable {
        k,
        subgroup_sizes: sizes,
        scores: normalize_rows(&averages),
    })
}

/// Long-format CSV: covariate, subgroup, relative score.
pub fn write_attention_csv(table: &AttentionTable, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["covariate", "subgroup", "score"])?;
    for (c, row) in table.scores.iter().enumerate() {
        for (g, v) in row.iter().enumerate() {
            w.write_record([c.to_string(), g.to_string(), v.map_or(String::new(), |v| v.to_string())])?;
        }
    }
    w.flush()?;
    Ok(())
}
