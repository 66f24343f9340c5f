use super::{VisitSequence, DAYS_PER_TIME_UNIT};
use crate::autograd::{Mat, Segments, SparseEntries};
use crate::error::{invalid, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Per-code affine scaling applied to stored entries before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    /// Z-scores from the stored entries of `seqs`. Returns `None` for binary
    /// occurrence data, which is left untouched.
    pub fn fit(seqs: &[VisitSequence]) -> Option<Self> {
        let m = seqs.first()?.n_codes;
        let binary = seqs
            .iter()
            .flat_map(|s| s.visits.iter().flatten())
            .all(|&(_, v)| v == 1.0);
        if binary {
            return None;
        }
        let mut n = vec![0usize; m];
        let mut sum = vec![0.0; m];
        for &(c, v) in seqs.iter().flat_map(|s| s.visits.iter().flatten()) {
            n[c] += 1;
            sum[c] += v;
        }
        let center: Vec<f64> = (0..m)
            .map(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { 0.0 })
            .collect();
        let mut ss = vec![0.0; m];
        for &(c, v) in seqs.iter().flat_map(|s| s.visits.iter().flatten()) {
            ss[c] += (v - center[c]).powi(2);
        }
        let scale = (0..m)
            .map(|c| {
                let sd = if n[c] > 1 { (ss[c] / (n[c] - 1) as f64).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { center, scale })
    }

    fn apply(&self, code: usize, v: f64) -> f64 {
        (v - self.center[code]) / self.scale[code]
    }
}

/// Sparse tape inputs for a batch of visit sequences.
///
/// Only unmasked visits become rows; histories longer than the encoder's
/// visit window keep their most recent visits. Positions inside the window
/// count from the oldest kept visit.
#[derive(Debug, Clone)]
pub struct EncoderBatch {
    pub n_codes: usize,
    pub max_visits: usize,
    pub segments: Rc<Segments>,
    /// `rows x M` (scaled) code values per kept visit.
    pub visit_codes: Rc<SparseEntries>,
    /// `(B * M) x (M * T_max)` padded occurrence vector of each code.
    pub code_occurrence: Rc<SparseEntries>,
    /// `(B * M) x M` selector of each code's bias row.
    pub code_identity: Rc<SparseEntries>,
    /// `B x T_max` padded time vectors.
    pub time_input: Rc<SparseEntries>,
    /// `rows x 1`, number of kept visits of the owning sample.
    pub visit_counts: Mat,
    /// Original visit index of every kept row, per sample.
    pub kept_visits: Vec<Vec<usize>>,
}

impl EncoderBatch {
    pub fn build(
        seqs: &[VisitSequence],
        max_visits: usize,
        scaling: Option<&FeatureScaling>,
    ) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return invalid("empty batch");
        };
        let m = first.n_codes;
        if max_visits == 0 {
            return invalid("visit window must be positive");
        }
        let b = seqs.len();
        let mut kept_visits = Vec::with_capacity(b);
        let mut lengths = Vec::with_capacity(b);
        let mut visit_entries = Vec::new();
        let mut occ = Vec::new();
        let mut time = Vec::new();
        let mut counts = Vec::new();
        let mut row = 0;
        for (i, seq) in seqs.iter().enumerate() {
            if seq.n_codes != m {
                return invalid("sequences in a batch must share the code vocabulary");
            }
            let valid: Vec<usize> = (0..seq.len()).filter(|&t| seq.valid[t]).collect();
            if valid.is_empty() {
                return invalid(format!("sequence {i} has no unmasked visit"));
            }
            let kept: Vec<usize> = valid[valid.len().saturating_sub(max_visits)..].to_vec();
            let mut per_code: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
            for (pos, &t) in kept.iter().enumerate() {
                let mut entries: Vec<(usize, f64)> = seq.visits[t]
                    .iter()
                    .map(|&(c, v)| (c, scaling.map_or(v, |s| s.apply(c, v))))
                    .collect();
                entries.sort_by_key(|e| e.0);
                for &(c, v) in &entries {
                    visit_entries.push((row, c, v));
                    per_code[c].push((pos, v));
                }
                let days = seq.days_before_index[t] / DAYS_PER_TIME_UNIT;
                if days != 0.0 {
                    time.push((i, pos, days));
                }
                counts.push(kept.len() as f64);
                row += 1;
            }
            for (c, list) in per_code.into_iter().enumerate() {
                for (pos, v) in list {
                    occ.push((i * m + c, c * max_visits + pos, v));
                }
            }
            lengths.push(kept.len());
            kept_visits.push(kept);
        }
        occ.sort_by_key(|e| (e.0, e.1));
        let identity = (0..b * m).map(|r| (r, r % m, 1.0)).collect();
        Ok(Self {
            n_codes: m,
            max_visits,
            segments: Rc::new(Segments::new(&lengths, vec![true; row])),
            visit_codes: Rc::new(SparseEntries::new(row, m, visit_entries)),
            code_occurrence: Rc::new(SparseEntries::new(b * m, m * max_visits, occ)),
            code_identity: Rc::new(SparseEntries::new(b * m, m, identity)),
            time_input: Rc::new(SparseEntries::new(b, max_visits, time)),
            visit_counts: Array2::from_shape_vec((row, 1), counts).expect("shape"),
            kept_visits,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.kept_visits.len()
    }
}
