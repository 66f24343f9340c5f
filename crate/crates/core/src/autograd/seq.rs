//! Fused operations over variable-length sequences and sparse inputs.

use super::{Mat, Var};
use ndarray::Array2;
use std::rc::Rc;

/// Row partition of a batch into per-sample segments, plus a validity flag
/// per row. Invalid rows never contribute to softmaxes, attention keys or
/// pooled outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    offsets: Vec<usize>,
    valid: Vec<bool>,
    sample_of_row: Vec<usize>,
}

impl Segments {
    pub fn new(lengths: &[usize], valid: Vec<bool>) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut sample_of_row = Vec::new();
        for (b, &len) in lengths.iter().enumerate() {
            offsets.push(offsets[b] + len);
            sample_of_row.extend(std::iter::repeat_n(b, len));
        }
        assert_eq!(valid.len(), *offsets.last().unwrap(), "validity flags must cover every row");
        Self {
            offsets,
            valid,
            sample_of_row,
        }
    }

    /// `n` segments of `len` rows each, all valid.
    pub fn uniform(n: usize, len: usize) -> Self {
        Self::new(&vec![len; n], vec![true; n * len])
    }

    pub fn n_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    pub fn sample_of(&self, row: usize) -> usize {
        self.sample_of_row[row]
    }

    fn valid_count(&self, b: usize) -> usize {
        self.range(b).filter(|&r| self.valid[r]).count()
    }
}

/// Sparse constant matrix stored as `(row, col, value)` triples in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEntries {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseEntries {
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 <= w[1].0), "entries must be row-sorted");
        debug_assert!(entries.iter().all(|&(r, c, _)| r < n_rows && c < n_cols));
        Self {
            n_rows,
            n_cols,
            entries,
        }
    }
}

impl<'t> Var<'t> {
    /// `S · W` for a constant sparse `S`; `self` is `W`.
    pub fn sparse_left_mul(&self, s: &Rc<SparseEntries>) -> Var<'t> {
        let w = self.value();
        let (wr, h) = w.dim();
        assert_eq!(s.n_cols, wr, "sparse_left_mul dimension mismatch");
        let mut out = Array2::zeros((s.n_rows, h));
        for &(r, c, v) in &s.entries {
            let mut orow = out.row_mut(r);
            orow.scaled_add(v, &w.row(c));
        }
        let s = s.clone();
        self.tape.push(out, &[*self], move |g, _| {
            let mut dw = Array2::zeros((wr, h));
            for &(r, c, v) in &s.entries {
                dw.row_mut(c).scaled_add(v, &g.row(r));
            }
            vec![Some(dw)]
        })
    }

    /// Softmax of an `n x 1` column of logits within each segment. Invalid
    /// rows get probability exactly zero.
    pub fn segment_softmax(&self, seg: &Rc<Segments>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.dim(), (seg.n_rows(), 1), "segment_softmax expects one logit per row");
        let mut out = Array2::zeros((seg.n_rows(), 1));
        for b in 0..seg.n_segments() {
            let rows = seg.range(b);
            let mx = rows
                .clone()
                .filter(|&r| seg.is_valid(r))
                .map(|r| x[[r, 0]])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for r in rows.clone().filter(|&r| seg.is_valid(r)) {
                let e = (x[[r, 0]] - mx).exp();
                out[[r, 0]] = e;
                s += e;
            }
            for r in rows.filter(|&r| seg.is_valid(r)) {
                out[[r, 0]] /= s;
            }
        }
        let p = Rc::new(out.clone());
        let seg = seg.clone();
        self.tape.push(out, &[*self], move |g, _| {
            let mut d = Array2::zeros(p.dim());
            for b in 0..seg.n_segments() {
                let rows = seg.range(b);
                let dot: f64 = rows.clone().map(|r| g[[r, 0]] * p[[r, 0]]).sum();
                for r in rows.filter(|&r| seg.is_valid(r)) {
                    d[[r, 0]] = p[[r, 0]] * (g[[r, 0]] - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Mean over the valid rows of each segment: `rows x h` to `segments x h`.
    pub fn segment_mean(&self, seg: &Rc<Segments>) -> Var<'t> {
        let x = self.value();
        let (n, h) = x.dim();
        assert_eq!(n, seg.n_rows(), "segment_mean row mismatch");
        let nb = seg.n_segments();
        let mut out = Array2::zeros((nb, h));
        for b in 0..nb {
            let cnt = seg.valid_count(b);
            if cnt == 0 {
                continue;
            }
            let mut orow = out.row_mut(b);
            for r in seg.range(b).filter(|&r| seg.is_valid(r)) {
                orow += &x.row(r);
            }
            orow /= cnt as f64;
        }
        let seg = seg.clone();
        self.tape.push(out, &[*self], move |g, _| {
            let mut d = Array2::zeros((n, h));
            for b in 0..seg.n_segments() {
                let cnt = seg.valid_count(b);
                if cnt == 0 {
                    continue;
                }
                let inv = 1.0 / cnt as f64;
                for r in seg.range(b).filter(|&r| seg.is_valid(r)) {
                    d.row_mut(r).scaled_add(inv, &g.row(b));
                }
            }
            vec![Some(d)]
        })
    }

    /// Broadcasts row `b` of `self` to every row of segment `b`.
    pub fn repeat_segments(&self, seg: &Rc<Segments>) -> Var<'t> {
        let x = self.value();
        let (nb, h) = x.dim();
        assert_eq!(nb, seg.n_segments(), "repeat_segments segment mismatch");
        let mut out = Array2::zeros((seg.n_rows(), h));
        for b in 0..nb {
            for r in seg.range(b) {
                out.row_mut(r).assign(&x.row(b));
            }
        }
        let seg = seg.clone();
        self.tape.push(out, &[*self], move |g, _| {
            let mut d = Array2::zeros((nb, h));
            for b in 0..nb {
                let mut drow = d.row_mut(b);
                for r in seg.range(b) {
                    drow += &g.row(r);
                }
            }
            vec![Some(d)]
        })
    }

    /// Attention-weighted input projection:
    /// `out[r] = Σ_m visit_att[r] · code_att[s(r)·M + m] · x[r, m] · W[m]`
    /// where `s(r)` is the sample owning visit row `r`. `self` is `W` (`M x h`).
    pub fn attended_projection(
        &self,
        visit_att: &Var<'t>,
        code_att: &Var<'t>,
        x: &Rc<SparseEntries>,
        seg: &Rc<Segments>,
    ) -> Var<'t> {
        let w = self.value();
        let av = visit_att.value();
        let ad = code_att.value();
        let (m_codes, h) = w.dim();
        assert_eq!(x.n_cols, m_codes, "attended_projection code dimension mismatch");
        assert_eq!(av.dim(), (seg.n_rows(), 1), "visit attention must be one value per row");
        assert_eq!(
            ad.dim(),
            (seg.n_segments() * m_codes, 1),
            "code attention must be one value per sample and code"
        );
        let mut out = Array2::zeros((x.n_rows, h));
        for &(r, m, v) in &x.entries {
            let s = seg.sample_of(r);
            let coef = av[[r, 0]] * ad[[s * m_codes + m, 0]] * v;
            out.row_mut(r).scaled_add(coef, &w.row(m));
        }
        let x = x.clone();
        let seg = seg.clone();
        self.tape
            .push(out, &[*self, *visit_att, *code_att], move |g, needs| {
                let mut dw = needs[0].then(|| Array2::zeros((m_codes, h)));
                let mut dav = needs[1].then(|| Array2::zeros(av.dim()));
                let mut dad = needs[2].then(|| Array2::zeros(ad.dim()));
                for &(r, m, v) in &x.entries {
                    let s = seg.sample_of(r);
                    let a_v = av[[r, 0]];
                    let a_d = ad[[s * m_codes + m, 0]];
                    let grow = g.row(r);
                    if let Some(dw) = dw.as_mut() {
                        dw.row_mut(m).scaled_add(a_v * a_d * v, &grow);
                    }
                    if dav.is_some() || dad.is_some() {
                        let gw: f64 = grow.dot(&w.row(m)) * v;
                        if let Some(dav) = dav.as_mut() {
                            dav[[r, 0]] += a_d * gw;
                        }
                        if let Some(dad) = dad.as_mut() {
                            dad[[s * m_codes + m, 0]] += a_v * gw;
                        }
                    }
                }
                vec![dw, dav, dad]
            })
    }

    /// Multi-head scaled dot-product self-attention within each segment.
    /// `self`, `k`, `v` are the query, key and value projections (`rows x h`);
    /// heads split the columns evenly. Invalid rows are never attended to.
    pub fn segment_self_attention(
        &self,
        k: &Var<'t>,
        v: &Var<'t>,
        seg: &Rc<Segments>,
        heads: usize,
    ) -> Var<'t> {
        let q = self.value();
        let kv = k.value();
        let vv = v.value();
        let (n, h) = q.dim();
        assert_eq!(n, seg.n_rows(), "attention row mismatch");
        assert!(heads > 0 && h % heads == 0, "width {h} not divisible by {heads} heads");
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // probs[b][head] is a (rows_b x valid_b) matrix
        let mut probs: Vec<Vec<Mat>> = Vec::with_capacity(seg.n_segments());
        let mut keys: Vec<Vec<usize>> = Vec::with_capacity(seg.n_segments());
        let mut out = Array2::zeros((n, h));
        for b in 0..seg.n_segments() {
            let rows: Vec<usize> = seg.range(b).collect();
            let kr: Vec<usize> = rows.iter().copied().filter(|&r| seg.is_valid(r)).collect();
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let c0 = hd * dh;
                let mut p = Array2::zeros((rows.len(), kr.len()));
                for (qi, &r) in rows.iter().enumerate() {
                    let mut mx = f64::NEG_INFINITY;
                    for (ki, &kr_) in kr.iter().enumerate() {
                        let mut s = 0.0;
                        for c in c0..c0 + dh {
                            s += q[[r, c]] * kv[[kr_, c]];
                        }
                        s *= scale;
                        p[[qi, ki]] = s;
                        mx = mx.max(s);
                    }
                    let mut tot = 0.0;
                    for ki in 0..kr.len() {
                        let e = (p[[qi, ki]] - mx).exp();
                        p[[qi, ki]] = e;
                        tot += e;
                    }
                    for ki in 0..kr.len() {
                        p[[qi, ki]] /= tot;
                    }
                    for (ki, &kr_) in kr.iter().enumerate() {
                        let w = p[[qi, ki]];
                        for c in c0..c0 + dh {
                            out[[r, c]] += w * vv[[kr_, c]];
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
            keys.push(kr);
        }
        let seg = seg.clone();
        self.tape.push(out, &[*self, *k, *v], move |g, _| {
            let mut dq = Array2::zeros((n, h));
            let mut dk = Array2::zeros((n, h));
            let mut dv = Array2::zeros((n, h));
            for b in 0..seg.n_segments() {
                let rows: Vec<usize> = seg.range(b).collect();
                let kr = &keys[b];
                for hd in 0..heads {
                    let c0 = hd * dh;
                    let p = &probs[b][hd];
                    for (qi, &r) in rows.iter().enumerate() {
                        // dP[qi, ki] = g[r] · v[k]
                        let mut dp = vec![0.0; kr.len()];
                        let mut dot = 0.0;
                        for (ki, &kr_) in kr.iter().enumerate() {
                            let mut s = 0.0;
                            for c in c0..c0 + dh {
                                s += g[[r, c]] * vv[[kr_, c]];
                            }
                            dp[ki] = s;
                            dot += s * p[[qi, ki]];
                            let w = p[[qi, ki]];
                            for c in c0..c0 + dh {
                                dv[[kr_, c]] += w * g[[r, c]];
                            }
                        }
                        for (ki, &kr_) in kr.iter().enumerate() {
                            let ds = p[[qi, ki]] * (dp[ki] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in c0..c0 + dh {
                                dq[[r, c]] += ds * kv[[kr_, c]];
                                dk[[kr_, c]] += ds * q[[r, c]];
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use ndarray::array;

    fn fd_check<F>(x0: Mat, build: F)
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(x);
        let analytic = tape.backward(y).get_or_zeros(x);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let tp = Tape::new();
            let fp = build(tp.constant(xp)).item();
            let tm = Tape::new();
            let fm = build(tm.constant(xm)).item();
            let num = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((a - num).abs() <= 1e-6 * (1.0 + num.abs()), "idx {idx}: {a} vs {num}");
        }
    }

    fn seg() -> Rc<Segments> {
        Rc::new(Segments::new(&[3, 2], vec![true, true, false, true, true]))
    }

    #[test]
    fn segment_softmax_sums_to_one_and_zeroes_invalid() {
        let t = Tape::new();
        let x = t.constant(array![[0.5], [-1.0], [3.0], [0.0], [0.0]]);
        let p = x.segment_softmax(&seg()).value();
        assert_eq!(p[[2, 0]], 0.0);
        assert!((p[[0, 0]] + p[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((p[[3, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fused_sequence_gradients() {
        let s = seg();
        let x0 = array![[0.5, 0.1], [-1.0, 0.3], [3.0, -2.0], [0.2, 0.0], [0.7, -0.6]];
        let s1 = s.clone();
        fd_check(x0.column(0).to_owned().insert_axis(ndarray::Axis(1)), move |x| {
            let w = x.tape().constant(array![[1.0], [2.0], [5.0], [-1.0], [0.5]]);
            x.segment_softmax(&s1).mul(&w).square().sum_all()
        });
        let s2 = s.clone();
        fd_check(x0.clone(), move |x| x.segment_mean(&s2).square().sum_all());
        let s3 = s.clone();
        fd_check(array![[0.3, -0.1], [1.2, 0.4]], move |x| {
            let w = x.tape().constant(x0.clone());
            x.repeat_segments(&s3).mul(&w).sum_all()
        });
    }

    #[test]
    fn self_attention_gradients() {
        let s = seg();
        let q0 = array![
            [0.5, 0.1, 0.2, -0.3],
            [-1.0, 0.3, 0.0, 0.4],
            [0.1, -0.2, 0.6, 0.2],
            [0.2, 0.0, -0.5, 0.1],
            [0.7, -0.6, 0.3, 0.9]
        ];
        let k0 = q0.mapv(|v| 0.5 * v + 0.1);
        let v0 = q0.mapv(|v| v * v - 0.2);
        for which in 0..3 {
            let (q0c, k0c, v0c, sc) = (q0.clone(), k0.clone(), v0.clone(), s.clone());
            let base = [q0.clone(), k0.clone(), v0.clone()][which].clone();
            fd_check(base, move |x| {
                let t = x.tape();
                let q = if which == 0 { x } else { t.constant(q0c.clone()) };
                let k = if which == 1 { x } else { t.constant(k0c.clone()) };
                let v = if which == 2 { x } else { t.constant(v0c.clone()) };
                q.segment_self_attention(&k, &v, &sc, 2).square().sum_all()
            });
        }
    }

    #[test]
    fn attended_projection_gradients() {
        let s = Rc::new(Segments::new(&[2, 1], vec![true, true, true]));
        let x = Rc::new(SparseEntries::new(
            3,
            3,
            vec![(0, 0, 1.0), (0, 2, 1.0), (1, 1, 1.0), (2, 0, 0.5), (2, 2, -1.0)],
        ));
        let w0 = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]];
        let av0 = array![[0.3], [0.7], [1.0]];
        let ad0 = array![[0.2], [0.5], [0.3], [0.1], [0.1], [0.8]];
        for which in 0..3 {
            let (w, av, ad, x, s) = (w0.clone(), av0.clone(), ad0.clone(), x.clone(), s.clone());
            let base = [w0.clone(), av0.clone(), ad0.clone()][which].clone();
            fd_check(base, move |p| {
                let t = p.tape();
                let wv = if which == 0 { p } else { t.constant(w.clone()) };
                let avv = if which == 1 { p } else { t.constant(av.clone()) };
                let adv = if which == 2 { p } else { t.constant(ad.clone()) };
                wv.attended_projection(&avv, &adv, &x, &s).square().sum_all()
            });
        }
    }

    #[test]
    fn sparse_left_mul_matches_dense() {
        let x = Rc::new(SparseEntries::new(2, 3, vec![(0, 1, 2.0), (1, 0, 1.0), (1, 2, -1.0)]));
        let t = Tape::new();
        let w = t.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let y = w.sparse_left_mul(&x);
        assert_eq!(*y.value(), array![[6.0, 8.0], [-4.0, -4.0]]);
        let g = t.backward(y.sum_all()).get_or_zeros(w);
        assert_eq!(g, array![[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]]);
    }
}
