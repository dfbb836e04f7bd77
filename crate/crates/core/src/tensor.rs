//! Dense row-major 2-D tensors with reverse-mode automatic differentiation.
//!
//! The engine is an arena tape: every operation eagerly computes its value and
//! appends a node recording how to push gradients back to its parents. Node
//! creation order is a topological order, so the backward sweep is a single
//! reverse walk over the arena.
//!
//! Parameters are special: they occupy a prefix of the arena and survive
//! [`Tape::restart`], which truncates everything recorded after them. A
//! training step is `restart` → `zero_grad` → forward → `backward` →
//! optimizer update via [`Tensor::set_value`]. Calling `backward` twice
//! without a `restart` in between is an error, as is using a non-parameter
//! tensor recorded before the last `restart`.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{CroprError, Result};
use crate::scalar::Scalar;

/// Label value excluded from the cross-entropy mean.
pub const IGNORE_LABEL: usize = usize::MAX;

/// How a node's gradient reaches its parents. Parent fields are arena indices,
/// which are always strictly smaller than the node's own index.
enum Op<T> {
    /// Parameters, inputs, and stop-gradient copies: gradient sinks.
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddBias { x: usize, bias: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Reshape { x: usize },
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    SumAll { x: usize },
    MeanAll { x: usize },
    SumOverRows { x: usize },
    MeanOverRows { x: usize },
    SumOverCols { x: usize },
    MeanOverCols { x: usize },
    ConcatRows { a: usize, b: usize, a_rows: usize },
    ConcatCols { a: usize, b: usize, a_cols: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    ScatterRows { x: usize, indices: Vec<usize> },
    CrossEntropy { x: usize, targets: Vec<usize>, probs: Vec<T>, counted: usize },
    BceWithLogits { x: usize, targets: Vec<T> },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
}

impl<T: Scalar> Node<T> {
    fn new(rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![T::zero(); value.len()];
        Node { rows, cols, value, grad, op }
    }
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    /// Nodes `0..param_count` are persistent parameters.
    param_count: usize,
    /// Set when the first non-parameter node is recorded; no parameters may
    /// be created afterwards.
    params_frozen: bool,
    /// Set by `backward`, cleared by `restart`.
    backward_done: bool,
    /// Bumped by `restart`; non-parameter tensors from older epochs are stale.
    epoch: u64,
}

/// Shared recording context. Cloning is cheap (reference-counted handle).
#[derive(Clone)]
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node in the arena. Cloning aliases the same node.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    idx: usize,
    rows: usize,
    cols: usize,
    epoch: u64,
    is_param: bool,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]@{}", self.rows, self.cols, self.idx)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                param_count: 0,
                params_frozen: false,
                backward_done: false,
                epoch: 0,
            })),
        }
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Create a persistent parameter. Only allowed before the first
    /// non-parameter node is recorded.
    pub fn param(&self, rows: usize, cols: usize, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != rows * cols {
            return Err(CroprError::dimension(format!(
                "parameter data has {} elements, shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.params_frozen {
            return Err(CroprError::contract(
                "parameters must all be created before the first forward pass",
            ));
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node::new(rows, cols, data, Op::Leaf));
        inner.param_count = inner.nodes.len();
        let epoch = inner.epoch;
        drop(inner);
        Ok(Tensor { tape: self.clone(), idx, rows, cols, epoch, is_param: true })
    }

    /// Record a constant input for the current forward pass. Gradients
    /// accumulate on it but it has no parents.
    pub fn input(&self, rows: usize, cols: usize, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != rows * cols {
            return Err(CroprError::dimension(format!(
                "input data has {} elements, shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(self.record(rows, cols, data, Op::Leaf))
    }

    fn record(&self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Tensor<T> {
        let mut inner = self.inner.borrow_mut();
        inner.params_frozen = true;
        let idx = inner.nodes.len();
        inner.nodes.push(Node::new(rows, cols, value, op));
        let epoch = inner.epoch;
        drop(inner);
        Tensor { tape: self.clone(), idx, rows, cols, epoch, is_param: false }
    }

    /// Drop everything recorded since the parameters and allow a new
    /// forward/backward pass. Parameter values and gradients are untouched.
    pub fn restart(&self) {
        let mut inner = self.inner.borrow_mut();
        let keep = inner.param_count;
        inner.nodes.truncate(keep);
        inner.backward_done = false;
        inner.epoch += 1;
    }

    /// Zero the gradient buffers of every live node, parameters included.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Reverse sweep from `loss`, which must be a 1x1 tensor from the current
    /// epoch. Gradients accumulate; call [`Tape::zero_grad`] to reset them.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !self.same_tape(&loss.tape) {
            return Err(CroprError::contract("loss tensor belongs to a different tape"));
        }
        if loss.rows != 1 || loss.cols != 1 {
            return Err(CroprError::dimension(format!(
                "backward needs a 1x1 loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if loss.epoch != inner.epoch && !loss.is_param {
            return Err(CroprError::contract(
                "loss tensor is stale: it was recorded before the last restart",
            ));
        }
        if inner.backward_done {
            return Err(CroprError::contract(
                "backward already ran on this recording; restart() before running it again",
            ));
        }
        inner.backward_done = true;
        inner.backward_sweep(loss.idx);
        Ok(())
    }

    /// Number of live nodes (parameters plus recorded operations).
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Number of persistent parameter nodes.
    pub fn param_count(&self) -> usize {
        self.inner.borrow().param_count
    }
}

impl<T: Scalar> TapeInner<T> {
    fn backward_sweep(&mut self, loss_idx: usize) {
        self.nodes[loss_idx].grad[0] = T::one();
        for i in (0..=loss_idx).rev() {
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            apply_backward(&op, node, parents);
            // Nodes before the parameter watermark must stay leaves; everything
            // else is truncated on restart, so dropping `op` loses nothing.
        }
    }
}

/// Push `node`'s gradient to its parents. `parents` is the arena prefix
/// strictly before the node, so indices stored in `op` are in range.
fn apply_backward<T: Scalar>(op: &Op<T>, node: &Node<T>, parents: &mut [Node<T>]) {
    let g = &node.grad;
    match *op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, n) = (node.rows, node.cols);
            let k = parents[a].cols;
            // dA += dC * B^T, dB += A^T * dC; computed fresh, then accumulated.
            let da = matmul_nt(g, &parents[b].value, m, n, k);
            let db = matmul_tn(&parents[a].value, g, m, k, n);
            add_into(&mut parents[a].grad, &da);
            add_into(&mut parents[b].grad, &db);
        }
        Op::Transpose { x } => {
            let p = &mut parents[x];
            for r in 0..node.rows {
                for c in 0..node.cols {
                    p.grad[c * p.cols + r] = p.grad[c * p.cols + r] + g[r * node.cols + c];
                }
            }
        }
        Op::Add { a, b } => {
            add_into(&mut parents[a].grad, g);
            add_into(&mut parents[b].grad, g);
        }
        Op::Sub { a, b } => {
            add_into(&mut parents[a].grad, g);
            for (pg, &gi) in parents[b].grad.iter_mut().zip(g) {
                *pg = *pg - gi;
            }
        }
        Op::Mul { a, b } => {
            let da: Vec<T> = g.iter().zip(&parents[b].value).map(|(&gi, &bv)| gi * bv).collect();
            let db: Vec<T> = g.iter().zip(&parents[a].value).map(|(&gi, &av)| gi * av).collect();
            add_into(&mut parents[a].grad, &da);
            add_into(&mut parents[b].grad, &db);
        }
        Op::Scale { x, c } => {
            for (pg, &gi) in parents[x].grad.iter_mut().zip(g) {
                *pg = *pg + c * gi;
            }
        }
        Op::AddBias { x, bias } => {
            add_into(&mut parents[x].grad, g);
            let cols = node.cols;
            for r in 0..node.rows {
                for c in 0..cols {
                    parents[bias].grad[c] = parents[bias].grad[c] + g[r * cols + c];
                }
            }
        }
        Op::Gelu { x } => {
            let p = &mut parents[x];
            for (i, &gi) in g.iter().enumerate() {
                p.grad[i] = p.grad[i] + gi * gelu_grad(p.value[i]);
            }
        }
        Op::Exp { x } => {
            // d exp = exp, already computed as this node's value.
            let p = &mut parents[x];
            for (i, &gi) in g.iter().enumerate() {
                p.grad[i] = p.grad[i] + gi * node.value[i];
            }
        }
        Op::Log { x } => {
            let p = &mut parents[x];
            for (i, &gi) in g.iter().enumerate() {
                p.grad[i] = p.grad[i] + gi / p.value[i];
            }
        }
        Op::Reshape { x } => {
            add_into(&mut parents[x].grad, g);
        }
        Op::SoftmaxRows { x } => {
            let y = &node.value;
            let cols = node.cols;
            let p = &mut parents[x];
            for r in 0..node.rows {
                let row = r * cols;
                let mut dot = T::zero();
                for c in 0..cols {
                    dot = dot + g[row + c] * y[row + c];
                }
                for c in 0..cols {
                    p.grad[row + c] = p.grad[row + c] + y[row + c] * (g[row + c] - dot);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
            let (rows, cols) = (node.rows, node.cols);
            let inv_cols = T::one() / T::from_usize(cols);
            // Split borrows: gamma/beta/x are distinct indices by construction.
            let gamma_val = parents[gamma].value.clone();
            for r in 0..rows {
                let row = r * cols;
                // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for c in 0..cols {
                    let dxh = g[row + c] * gamma_val[c];
                    mean_dxhat = mean_dxhat + dxh;
                    mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[row + c];
                }
                mean_dxhat = mean_dxhat * inv_cols;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_cols;
                for c in 0..cols {
                    let dxh = g[row + c] * gamma_val[c];
                    let dx = rstd[r] * (dxh - mean_dxhat - xhat[row + c] * mean_dxhat_xhat);
                    parents[x].grad[row + c] = parents[x].grad[row + c] + dx;
                }
            }
            for r in 0..rows {
                let row = r * cols;
                for c in 0..cols {
                    parents[gamma].grad[c] = parents[gamma].grad[c] + g[row + c] * xhat[row + c];
                    parents[beta].grad[c] = parents[beta].grad[c] + g[row + c];
                }
            }
        }
        Op::SumAll { x } => {
            let s = g[0];
            for pg in parents[x].grad.iter_mut() {
                *pg = *pg + s;
            }
        }
        Op::MeanAll { x } => {
            let p = &mut parents[x];
            let s = g[0] / T::from_usize(p.value.len());
            for pg in p.grad.iter_mut() {
                *pg = *pg + s;
            }
        }
        Op::SumOverRows { x } => {
            let p = &mut parents[x];
            let cols = p.cols;
            for r in 0..p.rows {
                for c in 0..cols {
                    p.grad[r * cols + c] = p.grad[r * cols + c] + g[c];
                }
            }
        }
        Op::MeanOverRows { x } => {
            let p = &mut parents[x];
            let cols = p.cols;
            let inv = T::one() / T::from_usize(p.rows);
            for r in 0..p.rows {
                for c in 0..cols {
                    p.grad[r * cols + c] = p.grad[r * cols + c] + g[c] * inv;
                }
            }
        }
        Op::SumOverCols { x } => {
            let p = &mut parents[x];
            let cols = p.cols;
            for r in 0..p.rows {
                for c in 0..cols {
                    p.grad[r * cols + c] = p.grad[r * cols + c] + g[r];
                }
            }
        }
        Op::MeanOverCols { x } => {
            let p = &mut parents[x];
            let cols = p.cols;
            let inv = T::one() / T::from_usize(cols);
            for r in 0..p.rows {
                for c in 0..cols {
                    p.grad[r * cols + c] = p.grad[r * cols + c] + g[r] * inv;
                }
            }
        }
        Op::ConcatRows { a, b, a_rows } => {
            let cols = node.cols;
            let split = a_rows * cols;
            add_into(&mut parents[a].grad, &g[..split]);
            add_into(&mut parents[b].grad, &g[split..]);
        }
        Op::ConcatCols { a, b, a_cols } => {
            let cols = node.cols;
            for r in 0..node.rows {
                for c in 0..a_cols {
                    parents[a].grad[r * a_cols + c] =
                        parents[a].grad[r * a_cols + c] + g[r * cols + c];
                }
                let b_cols = cols - a_cols;
                for c in 0..b_cols {
                    parents[b].grad[r * b_cols + c] =
                        parents[b].grad[r * b_cols + c] + g[r * cols + a_cols + c];
                }
            }
        }
        Op::SliceCols { x, start } => {
            let p = &mut parents[x];
            for r in 0..node.rows {
                for c in 0..node.cols {
                    p.grad[r * p.cols + start + c] =
                        p.grad[r * p.cols + start + c] + g[r * node.cols + c];
                }
            }
        }
        Op::GatherRows { x, ref indices } => {
            let p = &mut parents[x];
            let cols = node.cols;
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..cols {
                    p.grad[src * cols + c] = p.grad[src * cols + c] + g[r * cols + c];
                }
            }
        }
        Op::ScatterRows { x, ref indices } => {
            // Backward of scatter is gather: each source row reads the
            // gradient at its destination.
            let p = &mut parents[x];
            let cols = node.cols;
            for (r, &dst) in indices.iter().enumerate() {
                for c in 0..cols {
                    p.grad[r * cols + c] = p.grad[r * cols + c] + g[dst * cols + c];
                }
            }
        }
        Op::CrossEntropy { x, ref targets, ref probs, counted } => {
            let p = &mut parents[x];
            let cols = p.cols;
            let scale = g[0] / T::from_usize(counted);
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_LABEL {
                    continue;
                }
                let row = r * cols;
                for c in 0..cols {
                    let indicator = if c == t { T::one() } else { T::zero() };
                    p.grad[row + c] = p.grad[row + c] + scale * (probs[row + c] - indicator);
                }
            }
        }
        Op::BceWithLogits { x, ref targets } => {
            let p = &mut parents[x];
            let scale = g[0] / T::from_usize(p.value.len());
            for i in 0..p.value.len() {
                let sig = T::one() / (T::one() + (-p.value[i]).exp());
                p.grad[i] = p.grad[i] + scale * (sig - targets[i]);
            }
        }
    }
}

// --- raw dense kernels ---------------------------------------------------

/// C = A(m x k) * B(k x n), row-major.
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// C = A(m x n) * B(k x n)^T -> m x k.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// C = A(m x k)^T * B(m x n) -> k x n.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let du = s * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

// --- tensor operations ----------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    fn check_live(&self) -> Result<()> {
        let inner = self.tape.inner.borrow();
        if self.is_param || self.epoch == inner.epoch {
            Ok(())
        } else {
            Err(CroprError::contract(
                "tensor is stale: it was recorded before the last restart",
            ))
        }
    }

    fn check_pair(&self, other: &Tensor<T>) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(CroprError::contract("operands belong to different tapes"));
        }
        self.check_live()?;
        other.check_live()
    }

    /// Copy of the node's current value.
    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Copy of the node's accumulated gradient.
    pub fn grad(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    /// Single element access.
    pub fn at(&self, r: usize, c: usize) -> T {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.idx].value[r * self.cols + c]
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self) -> Result<T> {
        if self.rows != 1 || self.cols != 1 {
            return Err(CroprError::dimension(format!(
                "scalar() needs a 1x1 tensor, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.tape.inner.borrow().nodes[self.idx].value[0])
    }

    /// Overwrite the node's value in place; used by optimizers and
    /// checkpoint loading on parameter tensors.
    pub fn set_value(&self, data: &[T]) -> Result<()> {
        if data.len() != self.len() {
            return Err(CroprError::dimension(format!(
                "set_value got {} elements for a {}x{} tensor",
                data.len(),
                self.rows,
                self.cols
            )));
        }
        self.tape.inner.borrow_mut().nodes[self.idx].value.copy_from_slice(data);
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(other)?;
        if self.cols != other.rows {
            return Err(CroprError::dimension(format!(
                "matmul {}x{} by {}x{}: inner dimensions differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let value = {
            let inner = self.tape.inner.borrow();
            matmul_nn(&inner.nodes[self.idx].value, &inner.nodes[other.idx].value, m, k, n)
        };
        Ok(self.tape.record(m, n, value, Op::Matmul { a: self.idx, b: other.idx }))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let (r, c) = (self.rows, self.cols);
        let value = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.idx].value;
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        };
        Ok(self.tape.record(c, r, value, Op::Transpose { x: self.idx }))
    }

    fn elementwise_pair(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        self.check_pair(other)?;
        if self.shape() != other.shape() {
            return Err(CroprError::dimension(format!(
                "{what} needs matching shapes, got {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise_pair(other, "add")?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .value
                .iter()
                .zip(&inner.nodes[other.idx].value)
                .map(|(&a, &b)| a + b)
                .collect()
        };
        Ok(self
            .tape
            .record(self.rows, self.cols, value, Op::Add { a: self.idx, b: other.idx }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise_pair(other, "sub")?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .value
                .iter()
                .zip(&inner.nodes[other.idx].value)
                .map(|(&a, &b)| a - b)
                .collect()
        };
        Ok(self
            .tape
            .record(self.rows, self.cols, value, Op::Sub { a: self.idx, b: other.idx }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise_pair(other, "mul")?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .value
                .iter()
                .zip(&inner.nodes[other.idx].value)
                .map(|(&a, &b)| a * b)
                .collect()
        };
        Ok(self
            .tape
            .record(self.rows, self.cols, value, Op::Mul { a: self.idx, b: other.idx }))
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.iter().map(|&v| v * c).collect()
        };
        Ok(self.tape.record(self.rows, self.cols, value, Op::Scale { x: self.idx, c }))
    }

    /// Add a 1 x cols bias vector to every row. The only broadcasting rule
    /// in the engine.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(bias)?;
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(CroprError::dimension(format!(
                "add_bias needs a 1x{} bias, got {}x{}",
                self.cols, bias.rows, bias.cols
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let b = &inner.nodes[bias.idx].value;
            let mut out = Vec::with_capacity(x.len());
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out.push(x[r * self.cols + c] + b[c]);
                }
            }
            out
        };
        Ok(self
            .tape
            .record(self.rows, self.cols, value, Op::AddBias { x: self.idx, bias: bias.idx }))
    }

    /// GELU with the tanh approximation used by standard ViT stacks.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.iter().map(|&v| gelu_val(v)).collect()
        };
        Ok(self.tape.record(self.rows, self.cols, value, Op::Gelu { x: self.idx }))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.iter().map(|&v| v.exp()).collect()
        };
        Ok(self.tape.record(self.rows, self.cols, value, Op::Exp { x: self.idx }))
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn log(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].value.iter().map(|&v| v.ln()).collect()
        };
        Ok(self.tape.record(self.rows, self.cols, value, Op::Log { x: self.idx }))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        self.check_live()?;
        if rows * cols != self.len() {
            return Err(CroprError::dimension(format!(
                "reshape {}x{} to {rows}x{cols} changes the element count",
                self.rows, self.cols
            )));
        }
        let value = self.value();
        Ok(self.tape.record(rows, cols, value, Op::Reshape { x: self.idx }))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            softmax_rows_raw(&inner.nodes[self.idx].value, self.rows, self.cols)
        };
        Ok(self.tape.record(self.rows, self.cols, value, Op::SoftmaxRows { x: self.idx }))
    }

    /// Per-row layer normalization with learnable 1 x cols scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        self.check_pair(gamma)?;
        self.check_pair(beta)?;
        if gamma.rows != 1 || gamma.cols != self.cols || beta.rows != 1 || beta.cols != self.cols {
            return Err(CroprError::dimension(format!(
                "layer_norm over {} columns needs 1x{} scale and shift, got {}x{} and {}x{}",
                self.cols, self.cols, gamma.rows, gamma.cols, beta.rows, beta.cols
            )));
        }
        let (rows, cols) = (self.rows, self.cols);
        let (value, xhat, rstd) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let gm = &inner.nodes[gamma.idx].value;
            let bt = &inner.nodes[beta.idx].value;
            let mut out = vec![T::zero(); rows * cols];
            let mut xhat = vec![T::zero(); rows * cols];
            let mut rstd = vec![T::zero(); rows];
            let inv_cols = T::one() / T::from_usize(cols);
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) * inv_cols;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .fold(T::zero(), |a, v| a + v)
                    * inv_cols;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * cols + c] = xh;
                    out[r * cols + c] = gm[c] * xh + bt[c];
                }
            }
            (out, xhat, rstd)
        };
        Ok(self.tape.record(
            rows,
            cols,
            value,
            Op::LayerNorm { x: self.idx, gamma: gamma.idx, beta: beta.idx, xhat, rstd },
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = {
            let inner = self.tape.inner.borrow();
            vec![inner.nodes[self.idx].value.iter().copied().fold(T::zero(), |a, v| a + v)]
        };
        Ok(self.tape.record(1, 1, value, Op::SumAll { x: self.idx }))
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        if self.len() == 0 {
            return Err(CroprError::dimension("mean_all of an empty tensor"));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let sum = inner.nodes[self.idx].value.iter().copied().fold(T::zero(), |a, v| a + v);
            vec![sum / T::from_usize(self.len())]
        };
        Ok(self.tape.record(1, 1, value, Op::MeanAll { x: self.idx }))
    }

    /// Column sums: rows x cols -> 1 x cols.
    pub fn sum_over_rows(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = self.column_reduce(T::one());
        Ok(self.tape.record(1, self.cols, value, Op::SumOverRows { x: self.idx }))
    }

    /// Column means: rows x cols -> 1 x cols. Used for average pooling.
    pub fn mean_over_rows(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        if self.rows == 0 {
            return Err(CroprError::dimension("mean_over_rows of a 0-row tensor"));
        }
        let value = self.column_reduce(T::one() / T::from_usize(self.rows));
        Ok(self.tape.record(1, self.cols, value, Op::MeanOverRows { x: self.idx }))
    }

    /// Row sums: rows x cols -> rows x 1.
    pub fn sum_over_cols(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = self.row_reduce(T::one());
        Ok(self.tape.record(self.rows, 1, value, Op::SumOverCols { x: self.idx }))
    }

    /// Row means: rows x cols -> rows x 1.
    pub fn mean_over_cols(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        if self.cols == 0 {
            return Err(CroprError::dimension("mean_over_cols of a 0-column tensor"));
        }
        let value = self.row_reduce(T::one() / T::from_usize(self.cols));
        Ok(self.tape.record(self.rows, 1, value, Op::MeanOverCols { x: self.idx }))
    }

    fn row_reduce(&self, scale: T) -> Vec<T> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.idx].value;
        (0..self.rows)
            .map(|r| {
                x[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .copied()
                    .fold(T::zero(), |a, v| a + v)
                    * scale
            })
            .collect()
    }

    fn column_reduce(&self, scale: T) -> Vec<T> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.idx].value;
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] = out[c] + x[r * self.cols + c];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        out
    }

    /// Stack `self` on top of `other` (column counts must match).
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(other)?;
        if self.cols != other.cols {
            return Err(CroprError::dimension(format!(
                "concat_rows needs equal column counts, got {} and {}",
                self.cols, other.cols
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let mut v = inner.nodes[self.idx].value.clone();
            v.extend_from_slice(&inner.nodes[other.idx].value);
            v
        };
        Ok(self.tape.record(
            self.rows + other.rows,
            self.cols,
            value,
            Op::ConcatRows { a: self.idx, b: other.idx, a_rows: self.rows },
        ))
    }

    /// Place `other`'s columns to the right of `self`'s (row counts must match).
    pub fn concat_cols(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(other)?;
        if self.rows != other.rows {
            return Err(CroprError::dimension(format!(
                "concat_cols needs equal row counts, got {} and {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            let mut out = Vec::with_capacity(self.rows * cols);
            for r in 0..self.rows {
                out.extend_from_slice(&a[r * self.cols..(r + 1) * self.cols]);
                out.extend_from_slice(&b[r * other.cols..(r + 1) * other.cols]);
            }
            out
        };
        Ok(self.tape.record(
            self.rows,
            cols,
            value,
            Op::ConcatCols { a: self.idx, b: other.idx, a_cols: self.cols },
        ))
    }

    /// Contiguous column window `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        self.check_live()?;
        if start + len > self.cols {
            return Err(CroprError::index(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + len,
                self.cols
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Vec::with_capacity(self.rows * len);
            for r in 0..self.rows {
                out.extend_from_slice(&x[r * self.cols + start..r * self.cols + start + len]);
            }
            out
        };
        Ok(self.tape.record(self.rows, len, value, Op::SliceCols { x: self.idx, start }))
    }

    /// Select rows by index, in order; duplicates are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        self.check_live()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(CroprError::index(format!(
                "gather_rows index {bad} out of range for {} rows",
                self.rows
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = Vec::with_capacity(indices.len() * self.cols);
            for &i in indices {
                out.extend_from_slice(&x[i * self.cols..(i + 1) * self.cols]);
            }
            out
        };
        Ok(self.tape.record(
            indices.len(),
            self.cols,
            value,
            Op::GatherRows { x: self.idx, indices: indices.to_vec() },
        ))
    }

    /// Spread rows into a zero matrix of `out_rows` rows: row `i` lands at
    /// `indices[i]`; rows hit more than once accumulate.
    pub fn scatter_rows(&self, indices: &[usize], out_rows: usize) -> Result<Tensor<T>> {
        self.check_live()?;
        if indices.len() != self.rows {
            return Err(CroprError::dimension(format!(
                "scatter_rows got {} indices for {} rows",
                indices.len(),
                self.rows
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(CroprError::index(format!(
                "scatter_rows destination {bad} out of range for {out_rows} rows"
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut out = vec![T::zero(); out_rows * self.cols];
            for (r, &dst) in indices.iter().enumerate() {
                for c in 0..self.cols {
                    out[dst * self.cols + c] = out[dst * self.cols + c] + x[r * self.cols + c];
                }
            }
            out
        };
        Ok(self.tape.record(
            out_rows,
            self.cols,
            value,
            Op::ScatterRows { x: self.idx, indices: indices.to_vec() },
        ))
    }

    /// Contiguous row window `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.rows {
            return Err(CroprError::index(format!(
                "slice_rows [{start}, {}) out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&indices)
    }

    /// Copy the value into a fresh leaf: gradient flows into the copy but
    /// never back to the source subgraph.
    pub fn stop_gradient(&self) -> Result<Tensor<T>> {
        self.check_live()?;
        let value = self.value();
        Ok(self.tape.record(self.rows, self.cols, value, Op::Leaf))
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    /// Rows labeled [`IGNORE_LABEL`] are excluded from the mean.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Tensor<T>> {
        self.check_live()?;
        if targets.len() != self.rows {
            return Err(CroprError::dimension(format!(
                "cross_entropy_mean got {} labels for {} rows",
                targets.len(),
                self.rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_LABEL && t >= self.cols) {
            return Err(CroprError::index(format!(
                "label {bad} out of range for {} classes",
                self.cols
            )));
        }
        let counted = targets.iter().filter(|&&t| t != IGNORE_LABEL).count();
        if counted == 0 {
            return Err(CroprError::contract("cross_entropy_mean: every label is ignored"));
        }
        let (value, probs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let probs = softmax_rows_raw(x, self.rows, self.cols);
            let mut loss = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_LABEL {
                    continue;
                }
                let row = &x[r * self.cols..(r + 1) * self.cols];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row
                    .iter()
                    .map(|&v| (v - max).exp())
                    .fold(T::zero(), |a, v| a + v)
                    .ln()
                    + max;
                loss = loss + lse - row[t];
            }
            (vec![loss / T::from_usize(counted)], probs)
        };
        Ok(self.tape.record(
            1,
            1,
            value,
            Op::CrossEntropy { x: self.idx, targets: targets.to_vec(), probs, counted },
        ))
    }

    /// Mean binary cross-entropy of logits against targets in [0, 1],
    /// averaged over every element. Computed in the stable
    /// `max(z,0) - z*y + ln(1+exp(-|z|))` form.
    pub fn bce_with_logits_mean(&self, targets: &[T]) -> Result<Tensor<T>> {
        self.check_live()?;
        if targets.len() != self.len() {
            return Err(CroprError::dimension(format!(
                "bce_with_logits_mean got {} targets for {} logits",
                targets.len(),
                self.len()
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let mut loss = T::zero();
            for (&z, &y) in x.iter().zip(targets) {
                let term = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
                loss = loss + term;
            }
            vec![loss / T::from_usize(x.len())]
        };
        Ok(self.tape.record(
            1,
            1,
            value,
            Op::BceWithLogits { x: self.idx, targets: targets.to_vec() },
        ))
    }
}

fn softmax_rows_raw<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + c] = e;
            denom = denom + e;
        }
        for c in 0..cols {
            out[r * cols + c] = out[r * cols + c] / denom;
        }
    }
    out
}
