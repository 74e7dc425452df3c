//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations are recorded in forward order into an arena of [`Node`]s;
//! since every node's inputs precede it on the tape, a reverse index sweep
//! is a reverse topological traversal, visiting each node exactly once.
//!
//! The op set is exactly what the alignment loss, the frozen generator, and
//! the hypernetwork need, including a gradient-correct stable sort, which is
//! what makes the order-statistics form of the 1D Wasserstein distance
//! differentiable (sorting is a permutation, so upstream gradients route to
//! the source positions).
//!
//! Conventions:
//! - 64-bit floats throughout.
//! - Elementwise binary ops support equal shapes or scalar-against-tensor;
//!   nothing else. Richer broadcasting is deliberately rejected.
//! - `abs` and `relu` use subgradient 0 at exactly 0.
//! - `backward` accumulates: repeated calls without zeroing add up.
//!
//! ```
//! use steerkit_core::tape::Tape;
//! use steerkit_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0, 1.0, 2.0]));
//! let sorted = tape.sort_ascending(x).unwrap();
//! assert_eq!(tape.value(sorted.sorted).data(), &[1.0, 2.0, 3.0]);
//!
//! // gradient of sum(sorted) routes back through the permutation
//! let loss = tape.sum(sorted.sorted);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Result of a differentiable ascending sort.
///
/// `permutation[i]` is the source index of the i-th smallest value; it is a
/// bijection on `[0, n)`. Ties keep source order (stable sort), so tied
/// gradient mass routes to the earliest index.
#[derive(Debug, Clone)]
pub struct SortResult {
    pub sorted: NodeId,
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Abs(NodeId),
    Pow(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    SortAsc(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// `[n, d] * [d]`, the `[d]` factor broadcast over rows.
    RowsMul(NodeId, NodeId),
    /// `[n, d] + [d]`, the `[d]` addend broadcast over rows.
    RowsAdd(NodeId, NodeId),
    /// Per-row feature normalization with learned gain/shift.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    /// 1-D concatenation.
    Concat(Vec<NodeId>),
    /// First `len` entries of a 1-D node.
    TakePrefix(NodeId, usize),
    /// Column `j` of an `[n, d]` node.
    Col(NodeId, usize),
    /// `sqrt(x)` with the derivative's denominator floored at `sqrt(eps)`.
    SqrtGuarded(NodeId, f64),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph. Confined to one worker; never shared.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, targets).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reset every accumulated gradient to zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            for g in n.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Shape rule shared by add/sub/mul: equal shapes, or one side scalar.
    fn binary_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else if self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {sa:?} vs {sb:?} (only equal shapes or scalar-vs-tensor)"
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| pick(va, i) + pick(vb, i))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| pick(va, i) - pick(vb, i))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| pick(va, i) * pick(vb, i))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> NodeId {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Pow(a, p), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sqrt_guarded(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::SqrtGuarded(a, eps), rg)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = va.data()[i * k + kk];
                for j in 0..n {
                    data[i * n + j] += aik * vb.data()[kk * n + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::Matmul(a, b), rg))
    }

    /// `w [m, k] · x [k] -> [m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape().len() != 2 || vx.shape().len() != 1 || vw.cols() != vx.numel() {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {:?} x {:?}",
                vw.shape(),
                vx.shape()
            )));
        }
        let (m, k) = (vw.rows(), vw.cols());
        let data: Vec<f64> = (0..m)
            .map(|i| {
                let row = &vw.data()[i * k..(i + 1) * k];
                row.iter().zip(vx.data()).map(|(a, b)| a * b).sum()
            })
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::MatVec(w, x), rg))
    }

    pub fn rows_mul(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.shape().len() != 2 || vv.shape().len() != 1 || va.cols() != vv.numel() {
            return Err(Error::ShapeMismatch(format!(
                "rows_mul: {:?} x {:?}",
                va.shape(),
                vv.shape()
            )));
        }
        let (n, d) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(va.data()[i * d + j] * vv.data()[j]);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor::matrix(n, d, data)?, Op::RowsMul(a, v), rg))
    }

    pub fn rows_add(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.shape().len() != 2 || vv.shape().len() != 1 || va.cols() != vv.numel() {
            return Err(Error::ShapeMismatch(format!(
                "rows_add: {:?} x {:?}",
                va.shape(),
                vv.shape()
            )));
        }
        let (n, d) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(va.data()[i * d + j] + vv.data()[j]);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor::matrix(n, d, data)?, Op::RowsAdd(a, v), rg))
    }

    /// Per-row zero-mean unit-variance normalization over the feature axis,
    /// then `gain ⊙ x̂ + shift`. Accepts `[n, d]` or a single `[d]` row.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = match vx.shape() {
            [_, d] => *d,
            [d] => *d,
            s => {
                return Err(Error::ShapeMismatch(format!("layer_norm input {s:?}")));
            }
        };
        if self.value(gain).shape() != [d] || self.value(shift).shape() != [d] {
            return Err(Error::ShapeMismatch("layer_norm gain/shift width".into()));
        }
        let shape = vx.shape().to_vec();
        let rows = vx.numel() / d;
        let mut data = Vec::with_capacity(vx.numel());
        for i in 0..rows {
            let row = &vx.data()[i * d..(i + 1) * d];
            let (mu, inv_sigma) = row_norm_stats(row, eps);
            for j in 0..d {
                let xhat = (row[j] - mu) * inv_sigma;
                data.push(self.value(gain).data()[j] * xhat + self.value(shift).data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm { x, gain, shift, eps },
            rg,
        ))
    }

    // ── structured ───────────────────────────────────────────────────

    /// Stable ascending sort of a 1-D node. NaN entries are an error.
    pub fn sort_ascending(&mut self, a: NodeId) -> Result<SortResult> {
        let va = self.value(a);
        if va.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "sort_ascending needs 1-D input, got {:?}",
                va.shape()
            )));
        }
        if va.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN in sort_ascending input".into()));
        }
        let mut perm: Vec<usize> = (0..va.numel()).collect();
        // sort_by is stable: ties keep source order.
        perm.sort_by(|&i, &j| va.data()[i].partial_cmp(&va.data()[j]).unwrap());
        let data: Vec<f64> = perm.iter().map(|&i| va.data()[i]).collect();
        let rg = self.rg(a);
        let sorted = self.push(Tensor::vector(data), Op::SortAsc(a, perm.clone()), rg);
        Ok(SortResult {
            sorted,
            permutation: perm,
        })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Degenerate("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Degenerate("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(Error::ShapeMismatch("concat needs 1-D parts".into()));
            }
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    pub fn take_prefix(&mut self, a: NodeId, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 1 || len > va.numel() {
            return Err(Error::ShapeMismatch(format!(
                "take_prefix({len}) of {:?}",
                va.shape()
            )));
        }
        let data = va.data()[..len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::TakePrefix(a, len), rg))
    }

    /// Column `j` of an `[n, d]` node as a `[n]` node.
    pub fn col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 || j >= va.cols() {
            return Err(Error::ShapeMismatch(format!(
                "col({j}) of {:?}",
                va.shape()
            )));
        }
        let value = va.col(j);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Col(a, j), rg))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates `dLoss/dNode` into every
    /// node's persistent `grad` (so repeated calls add up), using per-call
    /// scratch buffers internally so earlier accumulations never leak into
    /// the propagation itself.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; n];
        scratch[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match scratch[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(idx, &g, &mut scratch);
            // Fold this call's contribution into the persistent gradient.
            let node = &mut self.nodes[idx];
            for (dst, src) in node.grad.data_mut().iter_mut().zip(g.iter()) {
                *dst += src;
            }
        }
        Ok(())
    }

    fn backprop_one(&self, idx: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let add_to = |scratch: &mut [Option<Vec<f64>>], id: NodeId, n: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let buf = scratch[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_binary(scratch, *a, *b, g, |_| 1.0, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accum_binary(scratch, *a, *b, g, |_| 1.0, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum_binary(scratch, *a, *b, g, |i| pick(vb, i), |i| pick(va, i));
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                add_to(scratch, *a, va.numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let x = va.data()[i];
                        // subgradient 0 at exactly 0
                        let s = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[i] += gi * s;
                    }
                });
            }
            Op::Pow(a, p) => {
                let va = self.value(*a);
                let p = *p;
                add_to(scratch, *a, va.numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * p * va.data()[i].powf(p - 1.0);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                add_to(scratch, *a, va.numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        if va.data()[i] > 0.0 {
                            buf[i] += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                add_to(scratch, *a, y.numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let t = y.data()[i];
                        buf[i] += gi * (1.0 - t * t);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_to(scratch, *a, self.value(*a).numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * c;
                    }
                });
            }
            Op::SqrtGuarded(a, eps) => {
                let va = self.value(*a);
                let eps = *eps;
                add_to(scratch, *a, va.numel(), &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * 0.5 / va.data()[i].max(eps).sqrt();
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (va.rows(), va.cols(), vb.cols());
                add_to(scratch, *a, m * k, &mut |buf| {
                    // dA += G · Bᵀ
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += g[i * nn + j] * vb.data()[kk * nn + j];
                            }
                            buf[i * k + kk] += s;
                        }
                    }
                });
                add_to(scratch, *b, k * nn, &mut |buf| {
                    // dB += Aᵀ · G
                    for kk in 0..k {
                        for j in 0..nn {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data()[i * k + kk] * g[i * nn + j];
                            }
                            buf[kk * nn + j] += s;
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, k) = (vw.rows(), vw.cols());
                add_to(scratch, *w, m * k, &mut |buf| {
                    for i in 0..m {
                        for j in 0..k {
                            buf[i * k + j] += g[i] * vx.data()[j];
                        }
                    }
                });
                add_to(scratch, *x, k, &mut |buf| {
                    for i in 0..m {
                        for j in 0..k {
                            buf[j] += vw.data()[i * k + j] * g[i];
                        }
                    }
                });
            }
            Op::RowsMul(a, v) => {
                let (va, vv) = (self.value(*a), self.value(*v));
                let (n, d) = (va.rows(), va.cols());
                add_to(scratch, *a, n * d, &mut |buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[i * d + j] += g[i * d + j] * vv.data()[j];
                        }
                    }
                });
                add_to(scratch, *v, d, &mut |buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i * d + j] * va.data()[i * d + j];
                        }
                    }
                });
            }
            Op::RowsAdd(a, v) => {
                let va = self.value(*a);
                let (n, d) = (va.rows(), va.cols());
                add_to(scratch, *a, n * d, &mut |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g.iter()) {
                        *bi += gi;
                    }
                });
                add_to(scratch, *v, d, &mut |buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let (vx, vgain) = (self.value(*x), self.value(*gain));
                let d = vgain.numel();
                let rows = vx.numel() / d;
                add_to(scratch, *x, vx.numel(), &mut |buf| {
                    for r in 0..rows {
                        let row = &vx.data()[r * d..(r + 1) * d];
                        let (mu, inv_sigma) = row_norm_stats(row, *eps);
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_u = 0.0;
                        let mut mean_ux = 0.0;
                        let mut u = vec![0.0; d];
                        let mut xhat = vec![0.0; d];
                        for j in 0..d {
                            xhat[j] = (row[j] - mu) * inv_sigma;
                            u[j] = gr[j] * vgain.data()[j];
                            mean_u += u[j];
                            mean_ux += u[j] * xhat[j];
                        }
                        mean_u /= d as f64;
                        mean_ux /= d as f64;
                        for j in 0..d {
                            buf[r * d + j] += (u[j] - mean_u - xhat[j] * mean_ux) * inv_sigma;
                        }
                    }
                });
                add_to(scratch, *gain, d, &mut |buf| {
                    for r in 0..rows {
                        let row = &vx.data()[r * d..(r + 1) * d];
                        let (mu, inv_sigma) = row_norm_stats(row, *eps);
                        for j in 0..d {
                            buf[j] += g[r * d + j] * (row[j] - mu) * inv_sigma;
                        }
                    }
                });
                add_to(scratch, *shift, d, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SortAsc(a, perm) => {
                add_to(scratch, *a, perm.len(), &mut |buf| {
                    for (i, &src) in perm.iter().enumerate() {
                        buf[src] += g[i];
                    }
                });
            }
            Op::Sum(a) => {
                add_to(scratch, *a, self.value(*a).numel(), &mut |buf| {
                    for bi in buf.iter_mut() {
                        *bi += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                add_to(scratch, *a, n, &mut |buf| {
                    let share = g[0] / n as f64;
                    for bi in buf.iter_mut() {
                        *bi += share;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    add_to(scratch, p, len, &mut |buf| {
                        for j in 0..len {
                            buf[j] += g[off + j];
                        }
                    });
                    off += len;
                }
            }
            Op::TakePrefix(a, len) => {
                let n = self.value(*a).numel();
                let len = *len;
                add_to(scratch, *a, n, &mut |buf| {
                    for j in 0..len {
                        buf[j] += g[j];
                    }
                });
            }
            Op::Col(a, j) => {
                let va = self.value(*a);
                let (n, d) = (va.rows(), va.cols());
                let j = *j;
                add_to(scratch, *a, n * d, &mut |buf| {
                    for i in 0..n {
                        buf[i * d + j] += g[i];
                    }
                });
            }
        }
    }

    /// Backward for elementwise binaries under the equal-or-scalar rule:
    /// a scalar operand receives the sum of its per-position contributions.
    fn accum_binary(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        a: NodeId,
        b: NodeId,
        g: &[f64],
        da: impl Fn(usize) -> f64,
        db: impl Fn(usize) -> f64,
    ) {
        if self.nodes[a.0].requires_grad {
            let na = self.value(a).numel();
            let buf = scratch[a.0].get_or_insert_with(|| vec![0.0; na]);
            for (i, gi) in g.iter().enumerate() {
                let pos = if na == 1 { 0 } else { i };
                buf[pos] += gi * da(i);
            }
        }
        if self.nodes[b.0].requires_grad {
            let nb = self.value(b).numel();
            let buf = scratch[b.0].get_or_insert_with(|| vec![0.0; nb]);
            for (i, gi) in g.iter().enumerate() {
                let pos = if nb == 1 { 0 } else { i };
                buf[pos] += gi * db(i);
            }
        }
    }
}

/// Index into a tensor under the scalar-broadcast rule.
fn pick(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Mean and inverse standard deviation of one row (population variance).
fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}
