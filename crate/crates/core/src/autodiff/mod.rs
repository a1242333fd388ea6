//! Tape-free reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every primitive eagerly computes its forward value and records its inputs,
//! so the computation graph is just the web of `Rc` links hanging off the
//! loss. Dropping the loss frees the graph; leaf tensors (parameters) survive
//! across steps and accumulate gradients until [`Tensor::zero_grad`].

mod nn;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use nn::{mlp_forward, LinearLayer, Mlp};
pub use ops::{bce_with_logits, cosine_similarity, set_grl_sign_fault, softmax_cross_entropy, EPS};

/// Primitive that produced a tensor.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Abs(Tensor),
    Mean(Tensor),
    Sum(Tensor),
    MeanRows(Tensor),
    Scale(Tensor, f64),
    Concat(Vec<Tensor>),
    Slice(Tensor, usize),
    Gather(Tensor, Vec<usize>),
    Reshape(Tensor),
    GradScale(Tensor, f64),
    L2Normalize(Tensor, f64),
    BceWithLogits(Tensor, f64),
    SoftmaxCeRows(Tensor, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::GradScale(..) => "grad_reverse",
            Op::L2Normalize(..) => "l2_normalize",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::SoftmaxCeRows(..) => "softmax_cross_entropy",
        }
    }

    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::MeanRows(x)
            | Op::Scale(x, _)
            | Op::Slice(x, _)
            | Op::Gather(x, _)
            | Op::Reshape(x)
            | Op::GradScale(x, _)
            | Op::L2Normalize(x, _)
            | Op::BceWithLogits(x, _)
            | Op::SoftmaxCeRows(x, _) => vec![x],
            Op::Concat(xs) => xs.iter().collect(),
        }
    }
}

pub(crate) struct Node {
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
    requires_grad: bool,
}

/// A node in the computation graph. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.op_name())
            .field("shape", &self.0.shape)
            .field("values", &*self.0.value.borrow())
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Tensor(Rc::new(Node {
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            op,
            requires_grad,
        }))
    }

    pub(crate) fn from_op(shape: Vec<usize>, value: Vec<f64>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Self::build(shape, value, op, requires_grad)
    }

    /// Leaf tensor. Fails if `values.len()` disagrees with `shape`.
    pub fn leaf(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, values, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, values, false)
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::build(vec![values.len()], values.to_vec(), Op::Leaf, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], Op::Leaf, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1 && self.0.shape.len() <= 1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    /// Direct inputs of the primitive that produced this tensor.
    pub fn parents(&self) -> Vec<Tensor> {
        self.0.op.parents().into_iter().cloned().collect()
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        v[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let cols = self.0.shape[1];
        self.0.value.borrow()[i * cols..(i + 1) * cols].to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place.
    pub fn set_values(&self, values: &[f64]) {
        assert!(self.is_leaf(), "set_values on non-leaf tensor");
        let mut v = self.0.value.borrow_mut();
        assert_eq!(v.len(), values.len());
        v.copy_from_slice(values);
    }

    /// Applies `f(value, grad)` to each element of a leaf that holds a gradient.
    pub fn update_with_grad(&self, mut f: impl FnMut(&mut f64, f64)) {
        let grad = self.0.grad.borrow();
        if let Some(g) = grad.as_ref() {
            let mut v = self.0.value.borrow_mut();
            for (x, &gi) in v.iter_mut().zip(g) {
                f(x, gi);
            }
        }
    }

    /// A new leaf with the same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), Op::Leaf, false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of every reachable
    /// leaf with `requires_grad` are added into its grad slot.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            if node.is_leaf() {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            node.propagate(&g, &mut grads);
        }
        Ok(())
    }

    /// Post-order over the nodes that require grad; each node appears once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
        let mut acc = |t: &Tensor, f: &dyn Fn(&mut [f64])| {
            if !t.requires_grad() {
                return;
            }
            let slot = grads.entry(t.key()).or_insert_with(|| vec![0.0; t.len()]);
            f(slot);
        };
        let out = self.0.value.borrow();
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (a.values(), b.values());
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                let (av, bv) = (a.values(), b.values());
                // dA = G · Bᵀ
                acc(a, &|s| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            s[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(b, &|s| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let srow = &mut s[p * m..(p + 1) * m];
                            for (sj, gj) in srow.iter_mut().zip(grow) {
                                *sj += a_ip * gj;
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let m = bias.len();
                acc(x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(bias, &|s| {
                    for row in g.chunks(m) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Relu(x) => acc(x, &|s| {
                for i in 0..s.len() {
                    if out[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            }),
            Op::Sigmoid(x) => acc(x, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Abs(x) => {
                let xv = x.values();
                acc(x, &|s| {
                    for i in 0..s.len() {
                        let sign = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Mean(x) => {
                let w = g[0] / x.len() as f64;
                acc(x, &|s| s.iter_mut().for_each(|s| *s += w));
            }
            Op::Sum(x) => acc(x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanRows(x) => {
                let n = x.shape()[0] as f64;
                acc(x, &|s| {
                    for row in s.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(s, g)| *s += g / n);
                    }
                });
            }
            Op::Scale(x, c) => acc(x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::Concat(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = x.len();
                    let part = &g[offset..offset + len];
                    acc(x, &|s| s.iter_mut().zip(part).for_each(|(s, g)| *s += g));
                    offset += len;
                }
            }
            Op::Slice(x, start_row) => {
                let cols: usize = x.shape()[1..].iter().product();
                let off = start_row * cols;
                acc(x, &|s| {
                    s[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g)
                });
            }
            Op::Gather(x, idx) => {
                let cols: usize = x.shape()[1..].iter().product();
                acc(x, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        s[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Reshape(x) => acc(x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::GradScale(x, c) => acc(x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::L2Normalize(x, norm) => {
                if *norm > EPS {
                    // d/dx (x/‖x‖) applied to g: (g − y⟨y,g⟩)/‖x‖
                    let yg = dot(&out, g);
                    acc(x, &|s| {
                        for i in 0..s.len() {
                            s[i] += (g[i] - out[i] * yg) / norm;
                        }
                    });
                } else {
                    acc(x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g / EPS));
                }
            }
            Op::BceWithLogits(z, target) => {
                let zv = z.values()[0];
                let d = ops::sigmoid_scalar(zv) - target;
                acc(z, &|s| s[0] += g[0] * d);
            }
            Op::SoftmaxCeRows(logits, labels) => {
                let c = logits.shape()[1];
                let lv = logits.values();
                acc(logits, &|s| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &lv[r * c..(r + 1) * c];
                        let probs = ops::softmax(row);
                        let srow = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            srow[j] += g[r] * (probs[j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_gradient_matches_finite_difference() {
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        let fd = fd_grad(|v| v[0] * v[0], &[3.0], 1e-5);
        assert!((fd[0] - 6.0).abs() < 1e-8);
        assert!((x.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.scale(0.0).sum().add(&Tensor::scalar(5.0)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_input_sums_both_contributions() {
        // y = x*2 + x*3 -> dy/dx = 5
        let x = Tensor::param(&[1], vec![0.7]).unwrap();
        let a = x.scale(2.0);
        let b = x.scale(3.0);
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        // z = (x+x) * (x+x) at x=1.5 -> dz/dx = 8x = 12
        let x = Tensor::param(&[1], vec![1.5]).unwrap();
        let s = x.add(&x).unwrap();
        let z = s.mul(&s).unwrap().sum();
        z.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn leaves_have_no_parents_and_ops_record_them() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(&[3.0, 4.0]);
        assert!(a.parents().is_empty());
        let c = a.add(&b).unwrap();
        assert_eq!(c.op_name(), "add");
        assert_eq!(c.parents().len(), 2);
        assert!(c.parents()[0].ptr_eq(&a));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let w = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        w.mul(&x).unwrap().sum().backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }
}
