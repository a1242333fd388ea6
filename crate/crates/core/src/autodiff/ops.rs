use super::{dot, Op, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRL_SIGN_FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Mutation hook for verification harnesses: while set, `grad_reverse`
/// scales the backward gradient by `+lambda` on the current thread.
#[doc(hidden)]
pub fn set_grl_sign_fault(on: bool) {
    GRL_SIGN_FAULT.with(|f| f.set(on));
}

/// Norm floor shared by normalization and cosine similarity.
pub const EPS: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (av, bv) = (a.values(), b.values());
    av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Elementary primitives addressable by tag, for table-driven callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    Mean,
    Sum,
    Concat,
    Slice { start: usize, end: usize },
    Scale(f64),
}

impl Tensor {
    pub fn apply(op: Primitive, inputs: &[Tensor]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{op:?} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match op {
            Primitive::Add => arity(2).and_then(|_| inputs[0].add(&inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| inputs[0].sub(&inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| inputs[0].mul(&inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| inputs[0].matmul(&inputs[1])),
            Primitive::Relu => arity(1).map(|_| inputs[0].relu()),
            Primitive::Sigmoid => arity(1).map(|_| inputs[0].sigmoid()),
            Primitive::Mean => arity(1).map(|_| inputs[0].mean()),
            Primitive::Sum => arity(1).map(|_| inputs[0].sum()),
            Primitive::Concat => Tensor::concat(inputs),
            Primitive::Slice { start, end } => arity(1).and_then(|_| inputs[0].slice_rows(start, end)),
            Primitive::Scale(c) => arity(1).map(|_| inputs[0].scale(c)),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let v = zip_map(self, other, |x, y| x + y);
        Ok(Tensor::from_op(self.shape().to_vec(), v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let v = zip_map(self, other, |x, y| x - y);
        Ok(Tensor::from_op(self.shape().to_vec(), v, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let v = zip_map(self, other, |x, y| x * y);
        Ok(Tensor::from_op(self.shape().to_vec(), v, Op::Mul(self.clone(), other.clone())))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        {
            let (av, bv) = (self.values(), other.values());
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let a = av[i * k + p];
                    if a == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * m..(p + 1) * m];
                    for (o, b) in orow.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![n, m], out, Op::MatMul(self.clone(), other.clone())))
    }

    /// Adds a `[m]` vector to every row of a `[n, m]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let m = s[1];
        let mut v = self.to_vec();
        {
            let bv = bias.values();
            for row in v.chunks_mut(m.max(1)) {
                row.iter_mut().zip(bv.iter()).for_each(|(x, b)| *x += b);
            }
        }
        Ok(Tensor::from_op(s.to_vec(), v, Op::AddRow(self.clone(), bias.clone())))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.values().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.values().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Sigmoid(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let v = self.values().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Abs(self.clone()))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let v = self.values();
        let m = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        drop(v);
        Tensor::from_op(vec![], vec![m], Op::Mean(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    /// Column mean of a `[n, d]` matrix, giving `[d]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "mean_rows needs a non-empty [n, d] tensor, got {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.values().chunks(d.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(Tensor::from_op(vec![d], out, Op::MeanRows(self.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.values().iter().map(|&x| c * x).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Scale(self.clone(), c))
    }

    /// Concatenation along the leading axis. All inputs must agree on the
    /// trailing extents.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = &first.shape()[1.min(first.shape().len())..];
        let mut rows = 0;
        let mut v = Vec::new();
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.shape()[0];
            v.extend_from_slice(&p.values());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_op(shape, v, Op::Concat(parts.to_vec())))
    }

    /// Stacks equally shaped tensors into a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let rows: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<_>>()?;
        Tensor::concat(&rows)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() || start > end || end > s[0] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for shape {s:?}"
            )));
        }
        let cols: usize = s[1..].iter().product();
        let v = self.values()[start * cols..end * cols].to_vec();
        let mut shape = s.to_vec();
        shape[0] = end - start;
        Ok(Tensor::from_op(shape, v, Op::Slice(self.clone(), start)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::InvalidArgument("gather_rows on a scalar".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for shape {s:?}"
            )));
        }
        let cols: usize = s[1..].iter().product();
        let vals = self.values();
        let mut v = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            v.extend_from_slice(&vals[i * cols..(i + 1) * cols]);
        }
        drop(vals);
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        Ok(Tensor::from_op(shape, v, Op::Gather(self.clone(), idx.to_vec())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// Identity forward; on the way back the gradient is multiplied by
    /// `-lambda`.
    pub fn grad_reverse(&self, lambda: f64) -> Result<Tensor> {
        if !(lambda >= 0.0) {
            return Err(Error::NegativeLambda(lambda));
        }
        let sign = if GRL_SIGN_FAULT.with(|f| f.get()) { 1.0 } else { -1.0 };
        Ok(self.gradient_scale(sign * lambda))
    }

    /// Identity forward; multiplies the backward gradient by `factor`.
    pub fn gradient_scale(&self, factor: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.to_vec(), Op::GradScale(self.clone(), factor))
    }

    /// `x / max(‖x‖₂, EPS)`.
    pub fn l2_normalize(&self) -> Tensor {
        let norm = self.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm.max(EPS);
        let v = self.values().iter().map(|x| x / denom).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::L2Normalize(self.clone(), norm))
    }

    /// Euclidean norm of the values (not a graph node).
    pub fn norm(&self) -> f64 {
        let v = self.values();
        dot(&v, &v).sqrt()
    }
}

/// `⟨a,b⟩ / (max(‖a‖,ε)·max(‖b‖,ε))`, built as the dot product of the two
/// normalized inputs.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("cosine_similarity", a, b)?;
    Ok(a.l2_normalize().mul(&b.l2_normalize())?.sum())
}

/// Stable `softplus(z) - t·z`, i.e. BCE on a logit.
pub fn bce_with_logits(logit: &Tensor, target: f64) -> Result<Tensor> {
    if !logit.is_scalar() {
        return Err(Error::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logit.shape().to_vec(),
            rhs: vec![],
        });
    }
    if target != 0.0 && target != 1.0 {
        return Err(Error::InvalidArgument(format!("BCE target must be 0 or 1, got {target}")));
    }
    let z = logit.item();
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    Ok(Tensor::from_op(vec![], vec![loss], Op::BceWithLogits(logit.clone(), target)))
}

/// `-log softmax(logits)[label]` for a single `[C]` logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    let c = logits.len();
    let rows = logits.reshape(&[1, c])?;
    rows.softmax_cross_entropy_rows(&[label])?.reshape(&[])
}

impl Tensor {
    /// Per-row cross-entropy of a `[n, C]` logit matrix, giving `[n]`.
    pub fn softmax_cross_entropy_rows(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let vals = self.values();
        let losses: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &vals[r * c..(r + 1) * c];
                log_sum_exp(row) - row[l]
            })
            .collect();
        drop(vals);
        Ok(Tensor::from_op(
            vec![labels.len()],
            losses,
            Op::SoftmaxCeRows(self.clone(), labels.to_vec()),
        ))
    }
}
