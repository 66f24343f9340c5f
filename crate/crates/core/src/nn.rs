//! Parameter storage, layers and optimisers on top of the autograd tape.

use crate::autograd::{Gradients, Mat, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type ParamId = usize;

/// Ordered, named collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Glorot-uniform `rows x cols` matrix.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    /// Gradients for every parameter in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Mat> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input, output, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, output);
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        x.matmul(&p.get(self.weight)).add_row(&p.get(self.bias))
    }
}

/// Feed-forward stack with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `hidden_layers` ReLU layers of width `hidden`, then a linear map to `output`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input;
        for l in 0..hidden_layers {
            layers.push(Linear::new(store, &format!("{name}.{l}"), width, hidden, rng));
            width = hidden;
        }
        layers.push(Linear::new(
            store,
            &format!("{name}.{hidden_layers}"),
            width,
            output,
            rng,
        ));
        Self { layers }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h);
            if i < last {
                h = h.relu();
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam (or plain gradient descent) over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .values()
            .iter()
            .map(|v| Array2::zeros(v.dim()))
            .collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter().enumerate() {
                    store.value_mut(id).scaled_add(-self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (id, g) in grads.iter().enumerate() {
                    let m = &mut self.m[id];
                    let v = &mut self.v[id];
                    let p = store.value_mut(id);
                    let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
                    ndarray::Zip::from(p)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *p -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Largest per-tensor relative error `|g - n| / max(|g|, |n|)` between the
/// analytic gradients and central differences of `loss` over every
/// parameter in `ids`. Used to audit hand-written backward passes.
pub fn fd_relative_error<F>(store: &ParamStore, ids: &[usize], analytic: &[Array2<f64>], loss: F) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in ids {
        let g = &analytic[id];
        let mut diff2 = 0.0;
        let mut g2 = 0.0;
        let mut n2 = 0.0;
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = probe.value(id)[[r, c]];
            probe.value_mut(id)[[r, c]] = orig + h;
            let up = loss(&probe);
            probe.value_mut(id)[[r, c]] = orig - h;
            let down = loss(&probe);
            probe.value_mut(id)[[r, c]] = orig;
            let num = (up - down) / (2.0 * h);
            diff2 += (g[[r, c]] - num).powi(2);
            g2 += g[[r, c]].powi(2);
            n2 += num * num;
        }
        let denom = g2.sqrt().max(n2.sqrt());
        if denom > 1e-9 {
            let rel = diff2.sqrt() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, &store);
        for _ in 0..2000 {
            let tape = Tape::new();
            let p = store.bind(&tape, true);
            let loss = p.get(id).add_scalar(-1.0).square().sum_all();
            let grads = p.gradients(&tape.backward(loss));
            opt.step(&mut store, &grads);
        }
        for v in store.value(id).iter() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mlp_shapes_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "head", 4, 8, 2, 3, &mut rng);
        assert_eq!(store.n_scalars(), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Array2::ones((5, 4)));
        assert_eq!(mlp.forward(&p, &x).shape(), (5, 3));
    }
}
