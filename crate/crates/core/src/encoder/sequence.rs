use crate::error::{invalid, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One patient's visit history, oldest visit first.
///
/// Each visit stores its non-zero code entries as `(code, value)` pairs.
/// Claims histories carry binary occurrences; static benchmark rows are a
/// single visit whose entries are the raw covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSequence {
    pub n_codes: usize,
    pub visits: Vec<Vec<(usize, f64)>>,
    /// Non-negative days before the index date; non-increasing along the sequence.
    pub days_before_index: Vec<f64>,
    pub valid: Vec<bool>,
}

impl VisitSequence {
    /// A static covariate vector as a single visit at the index date.
    /// Every coordinate is stored, zeros included.
    pub fn from_static(x: &[f64]) -> Self {
        Self {
            n_codes: x.len(),
            visits: vec![x.iter().copied().enumerate().collect()],
            days_before_index: vec![0.0],
            valid: vec![true],
        }
    }

    /// Dense rows `(values, days_before_index)`, oldest first.
    pub fn from_dense_rows(n_codes: usize, rows: &[(Vec<f64>, f64)]) -> Self {
        Self {
            n_codes,
            visits: rows
                .iter()
                .map(|(v, _)| v.iter().copied().enumerate().collect())
                .collect(),
            days_before_index: rows.iter().map(|r| r.1).collect(),
            valid: vec![true; rows.len()],
        }
    }

    /// Binary code sets `(codes, days_before_index)`, oldest first.
    pub fn from_code_sets(n_codes: usize, visits: &[(Vec<usize>, f64)]) -> Self {
        Self {
            n_codes,
            visits: visits
                .iter()
                .map(|(codes, _)| {
                    let mut c = codes.clone();
                    c.sort_unstable();
                    c.dedup();
                    c.into_iter().map(|m| (m, 1.0)).collect()
                })
                .collect(),
            days_before_index: visits.iter().map(|v| v.1).collect(),
            valid: vec![true; visits.len()],
        }
    }

    /// Appends an all-zero masked visit at the end.
    pub fn push_masked(&mut self) {
        self.visits.push(Vec::new());
        self.days_before_index.push(0.0);
        self.valid.push(false);
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `T x M` code matrix.
    pub fn dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.n_codes));
        for (t, visit) in self.visits.iter().enumerate() {
            for &(m, v) in visit {
                out[[t, m]] = v;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.visits.len();
        if self.days_before_index.len() != t || self.valid.len() != t {
            return invalid("visit, time and mask lengths differ");
        }
        if self.n_valid() == 0 {
            return invalid("sequence has no unmasked visit");
        }
        for (i, visit) in self.visits.iter().enumerate() {
            if !self.valid[i] && !visit.is_empty() {
                return invalid(format!("masked visit {i} has code entries"));
            }
            for &(m, v) in visit {
                if m >= self.n_codes {
                    return invalid(format!("code {m} out of range for {} codes", self.n_codes));
                }
                if !v.is_finite() {
                    return invalid(format!("non-finite value in visit {i}"));
                }
            }
        }
        let valid_days: Vec<f64> = self
            .days_before_index
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(d, _)| *d)
            .collect();
        if valid_days.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return invalid("visit times must be finite non-negative days before index");
        }
        if valid_days.windows(2).any(|w| w[1] > w[0]) {
            return invalid("visits must be ordered oldest first");
        }
        Ok(())
    }
}
