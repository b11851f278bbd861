//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its inputs and a local gradient rule on an
//! implicit tape: the graph of [`Tensor`] handles themselves. Construction
//! order is topological by definition, so [`Tensor::backward`] walks the
//! graph once in reverse and accumulates `dL/dθ` into every leaf created
//! with `requires_grad = true`. Leaf gradients persist and keep
//! accumulating across `backward` calls until [`Tensor::zero_grad`] —
//! the usual training-step idiom.
//!
//! Storage is row-major and dense. Broadcasting is deliberately narrow:
//! a scalar combines with anything, and a `B×1` / `1×C` matrix combines
//! row-wise / column-wise with a `B×C` matrix. Nothing else.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

/// Floor applied inside logarithms, square-root gradients and norm
/// denominators. Softmax outputs are strictly positive so the floor is a
/// mathematical no-op, but it keeps extreme logits from producing NaNs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward expects a scalar loss, got shape {0:?}")]
    NotAScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for axis of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot mutate a non-leaf tensor")]
    NotALeaf,
}

/// Local gradient rule of a recorded operation.
#[derive(Debug, Clone)]
enum GradFn {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Tanh,
    ClampMin(f64),
    Matmul,
    Transpose,
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    SoftmaxRows,
    Row(usize),
    Col(usize),
}

#[derive(Debug)]
struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Leaf flag: persistent gradient accumulation target.
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

/// A dense multi-dimensional array of `f64` scalars, optionally attached
/// to the gradient tape. Cloning is cheap (reference-counted handle).
#[derive(Debug, Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Creates a leaf tensor. `requires_grad` marks the leaf as a
    /// gradient-accumulation target for [`Tensor::backward`].
    pub fn new(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidParameter(format!(
                "shape axes must be positive, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                grad_fn: None,
            }),
        })
    }

    /// Constant leaf (no gradient).
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, data, false)
    }

    /// Trainable leaf (`requires_grad = true`).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, data, true)
    }

    /// 1×1 constant scalar.
    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1, 1], vec![v], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = numel_of(&shape);
        Self::new(shape, vec![0.0; n], false)
    }

    /// B×C constant matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::constant(vec![rows, cols], data)
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Self {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Self {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad: false,
                needs_grad,
                grad: RefCell::new(None),
                parents,
                grad_fn: Some(grad_fn),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    /// Row count; the tensor must be a matrix.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Column count; the tensor must be a matrix.
    pub fn cols(&self) -> usize {
        self.inner.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.inner.shape.len() == 2
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrows the flat row-major data.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotAScalar(self.inner.shape.clone()));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Accumulated gradient of a leaf; `None` if no gradient has reached
    /// it (which for a detached path means exactly zero).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient as a dense vector, zeros when absent.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Clears the accumulated gradient of this leaf.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf tensor (parameter update).
    /// Gradients recorded against previously built graphs become stale.
    pub fn set_data(&self, data: &[f64]) -> Result<(), TensorError> {
        if self.inner.grad_fn.is_some() {
            return Err(TensorError::NotALeaf);
        }
        if data.len() != self.numel() {
            return Err(TensorError::LengthMismatch {
                shape: self.inner.shape.clone(),
                len: data.len(),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Stop-gradient: a constant leaf holding a copy of the current values.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.to_vec(), false)
            .expect("detach preserves a valid shape")
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "add", GradFn::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "sub", GradFn::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "mul", GradFn::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "div", GradFn::Div, |a, b| a / b)
    }

    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        grad_fn: GradFn,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            }
        })?;
        let la = self.data();
        let lb = rhs.data();
        let data = map_broadcast(&out_shape, self.shape(), &la, rhs.shape(), &lb, f);
        drop(la);
        drop(lb);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            grad_fn,
        ))
    }

    // ── elementwise unary ops ───────────────────────────────────────────

    pub fn neg(&self) -> Tensor {
        self.unary(GradFn::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(GradFn::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(GradFn::AddScalar, |x| x + c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(GradFn::Exp, f64::exp)
    }

    /// Natural log with the [`EPS`] floor inside.
    pub fn ln(&self) -> Tensor {
        self.unary(GradFn::Ln, |x| x.max(EPS).ln())
    }

    pub fn abs(&self) -> Tensor {
        self.unary(GradFn::Abs, f64::abs)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(GradFn::Sqrt, f64::sqrt)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(GradFn::Tanh, f64::tanh)
    }

    /// Elementwise `max(x, c)`; gradient passes only where `x > c`.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        self.unary(GradFn::ClampMin(c), move |x| x.max(c))
    }

    pub fn relu(&self) -> Tensor {
        self.clamp_min(0.0)
    }

    fn unary(&self, grad_fn: GradFn, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.inner.shape.clone(), data, vec![self.clone()], grad_fn)
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "matmul",
                shape: self.shape().to_vec(),
            });
        }
        if !rhs.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "matmul",
                shape: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            GradFn::Matmul,
        ))
    }

    pub fn t(&self) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "transpose",
                shape: self.shape().to_vec(),
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let data = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            GradFn::Transpose,
        ))
    }

    /// Row `i` as a 1×C matrix.
    pub fn row(&self, i: usize) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "row",
                shape: self.shape().to_vec(),
            });
        }
        if i >= self.rows() {
            return Err(TensorError::IndexOutOfRange {
                index: i,
                size: self.rows(),
            });
        }
        let c = self.cols();
        let data = self.data()[i * c..(i + 1) * c].to_vec();
        Ok(Tensor::from_op(
            vec![1, c],
            data,
            vec![self.clone()],
            GradFn::Row(i),
        ))
    }

    /// Column `j` as a B×1 matrix.
    pub fn col(&self, j: usize) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "col",
                shape: self.shape().to_vec(),
            });
        }
        if j >= self.cols() {
            return Err(TensorError::IndexOutOfRange {
                index: j,
                size: self.cols(),
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let src = self.data();
        let data: Vec<f64> = (0..r).map(|i| src[i * c + j]).collect();
        drop(src);
        Ok(Tensor::from_op(
            vec![r, 1],
            data,
            vec![self.clone()],
            GradFn::Col(j),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1, 1], vec![s], vec![self.clone()], GradFn::SumAll)
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        Tensor::from_op(vec![1, 1], vec![s / n], vec![self.clone()], GradFn::MeanAll)
    }

    /// Sum over one axis of a matrix, keeping the axis with size 1:
    /// axis 0 → 1×C, axis 1 → B×1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "axis reduction",
                shape: self.shape().to_vec(),
            });
        }
        if axis > 1 {
            return Err(TensorError::IndexOutOfRange {
                index: axis,
                size: 2,
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let src = self.data();
        let (shape, mut data) = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            (vec![1, c], out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = src[i * c..(i + 1) * c].iter().sum();
            }
            (vec![r, 1], out)
        };
        drop(src);
        let grad_fn = if mean {
            let len = if axis == 0 { r } else { c } as f64;
            for v in &mut data {
                *v /= len;
            }
            GradFn::MeanAxis(axis)
        } else {
            GradFn::SumAxis(axis)
        };
        Ok(Tensor::from_op(shape, data, vec![self.clone()], grad_fn))
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Temperature softmax over matrix rows:
    /// `P[i,j] = exp(F[i,j]/τ) / Σ_k exp(F[i,k]/τ)`, stabilized by
    /// subtracting the row maximum before exponentiation. Entries are
    /// strictly positive as long as the scaled row spread
    /// `(max − min)/τ` stays below the `exp` underflow threshold
    /// (≈ 700 nats in `f64`).
    pub fn softmax_rows(&self, tau: f64) -> Result<Tensor, TensorError> {
        if tau <= 0.0 || tau.is_nan() {
            return Err(TensorError::InvalidParameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "softmax_rows",
                shape: self.shape().to_vec(),
            });
        }
        let scaled = self.scale(1.0 / tau);
        let (r, c) = (scaled.rows(), scaled.cols());
        let src = scaled.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![r, c],
            data,
            vec![scaled],
            GradFn::SoftmaxRows,
        ))
    }

    /// Row-wise log-softmax at temperature `tau`, computed with the
    /// log-sum-exp trick (the row maximum is treated as a constant shift,
    /// which leaves both the value and the gradient exact).
    pub fn log_softmax_rows(&self, tau: f64) -> Result<Tensor, TensorError> {
        if tau <= 0.0 || tau.is_nan() {
            return Err(TensorError::InvalidParameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        if !self.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "log_softmax_rows",
                shape: self.shape().to_vec(),
            });
        }
        let scaled = self.scale(1.0 / tau);
        let row_max = scaled.row_max_detached();
        let shifted = scaled.sub(&row_max)?;
        let lse = shifted.exp().sum_axis(1)?.ln();
        shifted.sub(&lse)
    }

    /// Per-row maximum as a constant B×1 tensor (no gradient).
    fn row_max_detached(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let src = self.data();
        let data: Vec<f64> = (0..r)
            .map(|i| {
                src[i * c..(i + 1) * c]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        drop(src);
        Tensor::constant(vec![r, 1], data).expect("row max shape is valid")
    }

    // ── norms ───────────────────────────────────────────────────────────

    /// L2 norm of each row as a B×1 tensor.
    pub fn l2_norm_rows(&self) -> Result<Tensor, TensorError> {
        Ok(self.mul(self)?.sum_axis(1)?.sqrt())
    }

    /// L2 norm of each column as a 1×C tensor.
    pub fn l2_norm_cols(&self) -> Result<Tensor, TensorError> {
        Ok(self.mul(self)?.sum_axis(0)?.sqrt())
    }

    // ── evaluation-only helpers (no gradient) ───────────────────────────

    /// Index of the largest entry per row; ties go to the lower index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (r, c) = (self.rows(), self.cols());
        let src = self.data();
        (0..r)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Indices of the `k` largest entries per row, ties broken by lower
    /// class index.
    pub fn topk_rows(&self, k: usize) -> Result<Vec<Vec<usize>>, TensorError> {
        let (r, c) = (self.rows(), self.cols());
        if k == 0 || k > c {
            return Err(TensorError::IndexOutOfRange { index: k, size: c });
        }
        let src = self.data();
        Ok((0..r)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let mut idx: Vec<usize> = (0..c).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                idx.truncate(k);
                idx
            })
            .collect())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode backpropagation from a scalar loss. Visits every
    /// reachable node exactly once and adds `dL/dθ` into the persistent
    /// gradient of each `requires_grad` leaf.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotAScalar(self.inner.shape.clone()));
        }
        let topo = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for node in topo.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            if node.inner.requires_grad {
                let mut acc = node.inner.grad.borrow_mut();
                match acc.as_mut() {
                    Some(buf) => {
                        for (a, b) in buf.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *acc = Some(g.clone()),
                }
            }
            if let Some(grad_fn) = &node.inner.grad_fn {
                node.push_parent_grads(grad_fn, &g, &mut grads);
            }
        }
        Ok(())
    }

    /// Postorder over the subgraph that needs gradients: parents always
    /// precede their consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut topo = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(node) => {
                    if !visited.insert(node.key()) {
                        continue;
                    }
                    stack.push(Frame::Exit(node.clone()));
                    for p in &node.inner.parents {
                        if p.inner.needs_grad && !visited.contains(&p.key()) {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
                Frame::Exit(node) => topo.push(node),
            }
        }
        topo
    }

    fn push_parent_grads(&self, grad_fn: &GradFn, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
        let parents = &self.inner.parents;
        let mut send = |parent: &Tensor, contribution: Vec<f64>| {
            if !parent.inner.needs_grad {
                return;
            }
            let entry = grads
                .entry(parent.key())
                .or_insert_with(|| vec![0.0; parent.numel()]);
            for (a, b) in entry.iter_mut().zip(&contribution) {
                *a += b;
            }
        };

        match grad_fn {
            GradFn::Add => {
                send(
                    &parents[0],
                    reduce_to_shape(g, self.shape(), parents[0].shape()),
                );
                send(
                    &parents[1],
                    reduce_to_shape(g, self.shape(), parents[1].shape()),
                );
            }
            GradFn::Sub => {
                send(
                    &parents[0],
                    reduce_to_shape(g, self.shape(), parents[0].shape()),
                );
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                send(
                    &parents[1],
                    reduce_to_shape(&neg, self.shape(), parents[1].shape()),
                );
            }
            GradFn::Mul => {
                let (a, b) = (&parents[0], &parents[1]);
                let da = {
                    let bd = b.data();
                    mul_broadcast_grad(g, self.shape(), b.shape(), &bd)
                };
                let db = {
                    let ad = a.data();
                    mul_broadcast_grad(g, self.shape(), a.shape(), &ad)
                };
                send(a, reduce_to_shape(&da, self.shape(), a.shape()));
                send(b, reduce_to_shape(&db, self.shape(), b.shape()));
            }
            GradFn::Div => {
                let (a, b) = (&parents[0], &parents[1]);
                let ad = a.data();
                let bd = b.data();
                let (rs, cs) = flat_dims(self.shape());
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..rs {
                    for j in 0..cs {
                        let idx = i * cs + j;
                        let av = bcast_get(&ad, a.shape(), self.shape(), i, j);
                        let bv = bcast_get(&bd, b.shape(), self.shape(), i, j);
                        da[idx] = g[idx] / bv;
                        db[idx] = -g[idx] * av / (bv * bv);
                    }
                }
                drop(ad);
                drop(bd);
                send(a, reduce_to_shape(&da, self.shape(), a.shape()));
                send(b, reduce_to_shape(&db, self.shape(), b.shape()));
            }
            GradFn::Neg => {
                send(&parents[0], g.iter().map(|x| -x).collect());
            }
            GradFn::Scale(c) => {
                send(&parents[0], g.iter().map(|x| c * x).collect());
            }
            GradFn::AddScalar => {
                send(&parents[0], g.to_vec());
            }
            GradFn::Exp => {
                let out = self.data();
                send(
                    &parents[0],
                    g.iter().zip(out.iter()).map(|(gi, oi)| gi * oi).collect(),
                );
            }
            GradFn::Ln => {
                let x = parents[0].data();
                send(
                    &parents[0],
                    g.iter()
                        .zip(x.iter())
                        .map(|(gi, xi)| gi / xi.max(EPS))
                        .collect(),
                );
            }
            GradFn::Abs => {
                let x = parents[0].data();
                send(
                    &parents[0],
                    g.iter()
                        .zip(x.iter())
                        .map(|(gi, xi)| {
                            gi * if *xi > 0.0 {
                                1.0
                            } else if *xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            GradFn::Sqrt => {
                let out = self.data();
                send(
                    &parents[0],
                    g.iter()
                        .zip(out.iter())
                        .map(|(gi, oi)| gi / (2.0 * oi.max(EPS)))
                        .collect(),
                );
            }
            GradFn::Tanh => {
                let out = self.data();
                send(
                    &parents[0],
                    g.iter()
                        .zip(out.iter())
                        .map(|(gi, oi)| gi * (1.0 - oi * oi))
                        .collect(),
                );
            }
            GradFn::ClampMin(c) => {
                let x = parents[0].data();
                send(
                    &parents[0],
                    g.iter()
                        .zip(x.iter())
                        .map(|(gi, xi)| if *xi > *c { *gi } else { 0.0 })
                        .collect(),
                );
            }
            GradFn::Matmul => {
                let (a, b) = (&parents[0], &parents[1]);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                let da = {
                    let bd = b.data();
                    let bt = transpose_raw(&bd, k, n);
                    matmul_raw(g, &bt, m, n, k)
                };
                let db = {
                    let ad = a.data();
                    let at = transpose_raw(&ad, m, k);
                    matmul_raw(&at, g, k, m, n)
                };
                send(a, da);
                send(b, db);
            }
            GradFn::Transpose => {
                let (r, c) = (self.rows(), self.cols());
                send(&parents[0], transpose_raw(g, r, c));
            }
            GradFn::SumAll => {
                send(&parents[0], vec![g[0]; parents[0].numel()]);
            }
            GradFn::MeanAll => {
                let n = parents[0].numel() as f64;
                send(&parents[0], vec![g[0] / n; parents[0].numel()]);
            }
            GradFn::SumAxis(axis) | GradFn::MeanAxis(axis) => {
                let (r, c) = (parents[0].rows(), parents[0].cols());
                let denom = match grad_fn {
                    GradFn::MeanAxis(_) => {
                        if *axis == 0 {
                            r as f64
                        } else {
                            c as f64
                        }
                    }
                    _ => 1.0,
                };
                let mut dg = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let src = if *axis == 0 { g[j] } else { g[i] };
                        dg[i * c + j] = src / denom;
                    }
                }
                send(&parents[0], dg);
            }
            GradFn::SoftmaxRows => {
                let (r, c) = (self.rows(), self.cols());
                let s = self.data();
                let mut dg = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dot: f64 = (0..c).map(|j| g[base + j] * s[base + j]).sum();
                    for j in 0..c {
                        dg[base + j] = s[base + j] * (g[base + j] - dot);
                    }
                }
                drop(s);
                send(&parents[0], dg);
            }
            GradFn::Row(i) => {
                let (r, c) = (parents[0].rows(), parents[0].cols());
                let mut dg = vec![0.0; r * c];
                dg[i * c..(i + 1) * c].copy_from_slice(g);
                send(&parents[0], dg);
            }
            GradFn::Col(j) => {
                let (r, c) = (parents[0].rows(), parents[0].cols());
                let mut dg = vec![0.0; r * c];
                for i in 0..r {
                    dg[i * c + j] = g[i];
                }
                send(&parents[0], dg);
            }
        }
    }
}

// ── raw kernels and broadcast plumbing ──────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output shape of a broadcast pair, or `None` if the shapes are not
/// compatible. Allowed: identical shapes, a 1-element tensor against
/// anything, and matrix pairs where each axis matches or is 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if numel_of(a) == 1 {
        return Some(b.to_vec());
    }
    if numel_of(b) == 1 {
        return Some(a.to_vec());
    }
    if a.len() == 2 && b.len() == 2 {
        let r = match (a[0], b[0]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
        let c = match (a[1], b[1]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
        return Some(vec![r, c]);
    }
    None
}

fn flat_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        _ => (1, numel_of(shape)),
    }
}

/// Reads the operand entry feeding output position `(i, j)`.
fn bcast_get(data: &[f64], shape: &[usize], out_shape: &[usize], i: usize, j: usize) -> f64 {
    if shape == out_shape {
        let (_, cs) = flat_dims(out_shape);
        return data[i * cs + j];
    }
    if data.len() == 1 {
        return data[0];
    }
    let (r, c) = flat_dims(shape);
    let ri = if r == 1 { 0 } else { i };
    let cj = if c == 1 { 0 } else { j };
    data[ri * c + cj]
}

fn map_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let (rs, cs) = flat_dims(out_shape);
    let mut out = vec![0.0; rs * cs];
    for i in 0..rs {
        for j in 0..cs {
            out[i * cs + j] = f(
                bcast_get(a, a_shape, out_shape, i, j),
                bcast_get(b, b_shape, out_shape, i, j),
            );
        }
    }
    out
}

/// Gradient of `a ⊙ expand(b)` with respect to `a`, before reduction.
fn mul_broadcast_grad(
    g: &[f64],
    out_shape: &[usize],
    other_shape: &[usize],
    other: &[f64],
) -> Vec<f64> {
    let (rs, cs) = flat_dims(out_shape);
    let mut out = vec![0.0; rs * cs];
    for i in 0..rs {
        for j in 0..cs {
            out[i * cs + j] = g[i * cs + j] * bcast_get(other, other_shape, out_shape, i, j);
        }
    }
    out
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to_shape(g: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return g.to_vec();
    }
    if numel_of(target) == 1 {
        return vec![g.iter().sum()];
    }
    let (rs, cs) = flat_dims(out_shape);
    let (tr, tc) = flat_dims(target);
    let mut out = vec![0.0; tr * tc];
    for i in 0..rs {
        for j in 0..cs {
            let ri = if tr == 1 { 0 } else { i };
            let cj = if tc == 1 { 0 } else { j };
            out[ri * tc + cj] += g[i * cs + j];
        }
    }
    out
}
