//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every forward operation appends a node holding its value and a closure
//! that maps the node's output gradient to gradients for its parents.
//! Graphs are rebuilt for every mini-batch, which keeps the engine simple and
//! makes evaluation order (and therefore rounding) fully deterministic.
//!
//! All kernels compute each output row from the corresponding input rows only,
//! so results never depend on how samples are grouped into batches.

mod kernels;
mod ops;
mod seq;

pub use kernels::{matmul, matmul_a_bt, matmul_at_b};
pub use seq::{Segments, SparseEntries};

use ndarray::Array2;
use std::cell::RefCell;
use std::rc::Rc;

pub type Mat = Array2<f64>;

type BackwardFn = Box<dyn Fn(&Mat, &[bool]) -> Vec<Option<Mat>>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recording surface for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.idx, v.nrows(), v.ncols())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push_node(Rc::new(value), Vec::new(), None, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push_node(Rc::new(value), Vec::new(), None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(
        &self,
        value: Rc<Mat>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { tape: self, idx }
    }

    pub(crate) fn push<F>(&self, value: Mat, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Mat, &[bool]) -> Vec<Option<Mat>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.idx].requires_grad)
        };
        let parent_idx = parents.iter().map(|p| p.idx).collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(Rc::new(value), parent_idx, backward, requires_grad)
    }

    fn value_of(&self, idx: usize) -> Rc<Mat> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn requires_grad(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let root_val = &nodes[root.idx].value;
        assert_eq!(root_val.dim(), (1, 1), "backward root must be a 1x1 scalar");
        grads[root.idx] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.idx).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Mat> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of its shape if it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Mat {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.value().dim()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.idx)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.idx)
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    /// Copy of this value with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
