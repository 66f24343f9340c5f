use super::kernels::{matmul, matmul_a_bt, matmul_at_b};
use super::{Mat, Var};
use ndarray::{Array2, Axis, Zip};
use std::rc::Rc;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn col_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn row_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn std_layout(m: Mat) -> Mat {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().to_owned()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    fn unary<F>(&self, value: Mat, backward: F) -> Var<'t>
    where
        F: Fn(&Mat) -> Mat + 'static,
    {
        self.tape
            .push(std_layout(value), &[*self], move |g, _| vec![Some(backward(g))])
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = matmul(&a, &b);
        self.tape.push(out, &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| matmul_a_bt(g, &b)),
                needs[1].then(|| matmul_at_b(&a, g)),
            ]
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.dim(), b.dim(), "add shape mismatch");
        let out = &*a + &*b;
        self.tape.push(std_layout(out), &[*self, *other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.dim(), b.dim(), "sub shape mismatch");
        let out = &*a - &*b;
        self.tape.push(std_layout(out), &[*self, *other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| -g)]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
        let out = &*a * &*b;
        self.tape.push(std_layout(out), &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| std_layout(g * &*b)),
                needs[1].then(|| std_layout(g * &*a)),
            ]
        })
    }

    /// Adds a `1 x m` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = row.value();
        assert_eq!(b.nrows(), 1, "add_row expects a single row");
        assert_eq!(a.ncols(), b.ncols(), "add_row width mismatch");
        let out = &*a + &*b;
        self.tape.push(std_layout(out), &[*self, *row], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| col_sums(g))]
        })
    }

    /// Multiplies each row by the matching entry of an `n x 1` column.
    pub fn mul_col(&self, col: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let c = col.value();
        assert_eq!(c.ncols(), 1, "mul_col expects a column");
        assert_eq!(a.nrows(), c.nrows(), "mul_col height mismatch");
        let out = &*a * &*c;
        self.tape.push(std_layout(out), &[*self, *col], move |g, needs| {
            vec![
                needs[0].then(|| std_layout(g * &*c)),
                needs[1].then(|| row_sums(&(g * &*a))),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = &*self.value() * c;
        self.unary(out, move |g| g * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = &*self.value() + c;
        self.unary(out, |g| g.clone())
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0));
        self.unary(out, move |g| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*x).for_each(|d, &xv| {
                if xv <= 0.0 {
                    *d = 0.0
                }
            });
            d
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let s = Rc::new(self.value().mapv(stable_sigmoid));
        let s2 = s.clone();
        self.unary((*s).clone(), move |g| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*s2)
                .for_each(|d, &sv| *d *= sv * (1.0 - sv));
            d
        })
    }

    pub fn exp(&self) -> Var<'t> {
        let e = Rc::new(self.value().mapv(f64::exp));
        let e2 = e.clone();
        self.unary((*e).clone(), move |g| std_layout(g * &*e2))
    }

    pub fn square(&self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v * v);
        self.unary(out, move |g| std_layout(g * &*x * 2.0))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value();
        let dim = x.dim();
        let out = Array2::from_elem((1, 1), x.sum());
        self.unary(out, move |g| Array2::from_elem(dim, g[[0, 0]]))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&self) -> Var<'t> {
        let x = self.value();
        let m = x.ncols();
        let out = row_sums(&x);
        self.unary(out, move |g| {
            let n = g.nrows();
            let mut d = Array2::zeros((n, m));
            for (mut row, gv) in d.rows_mut().into_iter().zip(g.iter()) {
                row.fill(*gv);
            }
            d
        })
    }

    /// Row-wise log-sum-exp as an `n x 1` column.
    pub fn logsumexp_rows(&self) -> Var<'t> {
        let x = self.value();
        let (n, m) = x.dim();
        let mut out = Array2::zeros((n, 1));
        let mut soft = Array2::zeros((n, m));
        for i in 0..n {
            let row = x.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for &v in row.iter() {
                s += (v - mx).exp();
            }
            out[[i, 0]] = mx + s.ln();
            for j in 0..m {
                soft[[i, j]] = (x[[i, j]] - mx).exp() / s;
            }
        }
        self.unary(out, move |g| std_layout(&soft * g))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let (n, m) = x.dim();
        let mut out = Array2::zeros((n, m));
        let mut soft = Array2::zeros((n, m));
        for i in 0..n {
            let row = x.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for &v in row.iter() {
                s += (v - mx).exp();
            }
            let lse = mx + s.ln();
            for j in 0..m {
                out[[i, j]] = x[[i, j]] - lse;
                soft[[i, j]] = (x[[i, j]] - mx).exp() / s;
            }
        }
        self.unary(out, move |g| {
            let gs = row_sums(g);
            std_layout(g - &(&soft * &gs))
        })
    }

    /// Picks `x[i, idx[i]]` into an `n x 1` column.
    pub fn select_cols(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, m) = x.dim();
        assert_eq!(idx.len(), n, "select_cols index length mismatch");
        let out = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, idx[i]]]);
        let idx = idx.to_vec();
        self.unary(out, move |g| {
            let mut d = Array2::zeros((n, m));
            for (i, &j) in idx.iter().enumerate() {
                d[[i, j]] = g[[i, 0]];
            }
            d
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (n, m) = x.dim();
        assert!(start + len <= m, "slice_cols out of range");
        let out = x.slice(ndarray::s![.., start..start + len]).to_owned();
        self.unary(std_layout(out), move |g| {
            let mut d = Array2::zeros((n, m));
            d.slice_mut(ndarray::s![.., start..start + len]).assign(g);
            d
        })
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].nrows();
        let widths: Vec<usize> = vals.iter().map(|v| v.ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((n, total));
        let mut off = 0;
        for v in &vals {
            assert_eq!(v.nrows(), n, "concat_cols height mismatch");
            out.slice_mut(ndarray::s![.., off..off + v.ncols()]).assign(&**v);
            off += v.ncols();
        }
        tape.push(out, parts, move |g, needs| {
            let mut off = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let r = need.then(|| {
                        std_layout(g.slice(ndarray::s![.., off..off + w]).to_owned())
                    });
                    off += w;
                    r
                })
                .collect()
        })
    }

    /// Row `i` of the output is row `i` of `parts[choice[i]]`.
    pub fn choose_rows(parts: &[Var<'t>], choice: &[usize]) -> Var<'t> {
        assert!(!parts.is_empty(), "choose_rows of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let dim = vals[0].dim();
        assert_eq!(choice.len(), dim.0, "choose_rows choice length mismatch");
        let mut out = Array2::zeros(dim);
        for (i, &c) in choice.iter().enumerate() {
            assert!(c < parts.len(), "choose_rows choice out of range");
            out.row_mut(i).assign(&vals[c].row(i));
        }
        let choice = choice.to_vec();
        let k = parts.len();
        tape.push(out, parts, move |g, needs| {
            (0..k)
                .map(|p| {
                    needs[p].then(|| {
                        let mut d = Array2::zeros(dim);
                        for (i, &c) in choice.iter().enumerate() {
                            if c == p {
                                d.row_mut(i).assign(&g.row(i));
                            }
                        }
                        d
                    })
                })
                .collect()
        })
    }

    /// Row-wise layer normalisation with a learned gain and bias (`1 x m`).
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let gm = gain.value();
        let bm = bias.value();
        let (n, m) = x.dim();
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / m as f64;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                xhat[[i, j]] = (x[[i, j]] - mean) * is;
            }
        }
        let out = &xhat * &*gm + &*bm;
        self.tape
            .push(std_layout(out), &[*self, *gain, *bias], move |g, needs| {
                let dx = needs[0].then(|| {
                    let gx = g * &*gm;
                    let mut dx = Array2::zeros((n, m));
                    for i in 0..n {
                        let gr = gx.row(i);
                        let xr = xhat.row(i);
                        let mean_g = gr.sum() / m as f64;
                        let mean_gx = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>()
                            / m as f64;
                        for j in 0..m {
                            dx[[i, j]] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| col_sums(&(g * &xhat)));
                let db = needs[2].then(|| col_sums(g));
                vec![dx, dg, db]
            })
    }

    /// Diagonal-Gaussian log density of each row of `self` (`n x p`) under
    /// `N(mean, exp(log_var))`, as an `n x 1` column.
    pub fn gaussian_log_density(&self, mean: &Var<'t>, log_var: &Var<'t>) -> Var<'t> {
        let z = self.value();
        let mu = mean.value();
        let lv = log_var.value();
        assert_eq!(z.dim(), mu.dim(), "gaussian_log_density shape mismatch");
        assert_eq!(z.dim(), lv.dim(), "gaussian_log_density shape mismatch");
        let (n, p) = z.dim();
        let mut out = Array2::zeros((n, 1));
        let mut scaled = Array2::zeros((n, p)); // (z - mu) / var
        let mut sq = Array2::zeros((n, p)); // (z - mu)^2 / var
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..p {
                let d = z[[i, j]] - mu[[i, j]];
                let inv_var = (-lv[[i, j]]).exp();
                scaled[[i, j]] = d * inv_var;
                sq[[i, j]] = d * d * inv_var;
                acc += LN_2PI + lv[[i, j]] + sq[[i, j]];
            }
            out[[i, 0]] = -0.5 * acc;
        }
        self.tape
            .push(out, &[*self, *mean, *log_var], move |g, needs| {
                let dz = needs[0].then(|| std_layout(&scaled * g * -1.0));
                let dmu = needs[1].then(|| std_layout(&scaled * g));
                let dlv = needs[2].then(|| std_layout(sq.mapv(|s| -0.5 * (1.0 - s)) * g));
                vec![dz, dmu, dlv]
            })
    }

    /// Per-row binary cross-entropy of logits against constant targets in [0, 1].
    pub fn bce_with_logits(&self, targets: &[f64]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ncols(), 1, "bce_with_logits expects a column of logits");
        assert_eq!(x.nrows(), targets.len(), "bce_with_logits length mismatch");
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            softplus(x[[i, 0]]) - targets[i] * x[[i, 0]]
        });
        let targets = targets.to_vec();
        self.unary(out, move |g| {
            Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
                g[[i, 0]] * (stable_sigmoid(x[[i, 0]]) - targets[i])
            })
        })
    }
}
