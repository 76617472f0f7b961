//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! The tape is an append-only arena: every operation records its inputs and
//! produces a new immutable node, so replaying the arena in reverse visits
//! each node exactly once. Gradients accumulate additively across fan-out.
//! Calling [`Tape::backward`] twice without [`Tape::zero_grads`] doubles the
//! leaf gradients; reset between steps.
//!
//! Broadcasting for binary operations is numpy-style but deliberately
//! restricted to trailing-dimension alignment and size-1 expansion. Outputs
//! are always freshly allocated; an operation never aliases its inputs.

use crate::scalar::Scalar;
use crate::scan::ScanKernel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("{op}: token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange {
        op: &'static str,
        id: usize,
        vocab: usize,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataShapeMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Owned dense tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if data.len() != numel_of(&shape) {
            return Err(TensorError::DataShapeMismatch {
                op: "tensor",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Convenience for literals: converts from f64 elementwise.
    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise operation selector, the unary/binary op family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
    Sub,
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Neg,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Neg {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softplus {
        a: usize,
    },
    Silu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Sum {
        a: usize,
        axis: Option<usize>,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    Max {
        a: usize,
        axis: Option<usize>,
    },
    Reshape {
        a: usize,
    },
    CausalDepthwiseConv {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    Conv1dSame {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    RmsNorm {
        x: usize,
        weight: usize,
        eps: f64,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    Scan {
        a: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    BceWithLogit {
        logit: usize,
        target: f64,
    },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape. One tape per logical execution context; not
/// shared across concurrent training steps.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Broadcast helpers ────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides for reading `shape` as if expanded to a rank-`rank` output;
/// broadcast dimensions get stride 0.
fn expand_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Materialize `data` (of `shape`) expanded to `out_shape`.
fn expand<F: Scalar>(data: &[F], shape: &[usize], out_shape: &[usize]) -> Vec<F> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let strides = expand_strides(shape, rank);
    let n = numel_of(out_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    for _ in 0..n {
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * strides[d];
        }
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (of `out_shape`) back down to `target` shape, folding the
/// broadcast dimensions.
fn reduce_to_shape<F: Scalar>(grad: &[F], out_shape: &[usize], target: &[usize]) -> Vec<F> {
    if out_shape == target {
        return grad.to_vec();
    }
    let rank = out_shape.len();
    let strides = expand_strides(target, rank);
    let mut out = vec![F::zero(); numel_of(target)];
    let mut coords = vec![0usize; rank];
    for g in grad {
        let mut dst = 0;
        for d in 0..rank {
            dst += coords[d] * strides[d];
        }
        out[dst] += *g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

// ── Raw kernels ──────────────────────────────────────────────────────

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus_scalar<F: Scalar>(x: F) -> F {
    // Linear past 30: exp would saturate the addend anyway.
    if x > F::from_f64(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// (outer, axis_size, inner) decomposition of `shape` around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dropped_axis_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

// ── Tape ─────────────────────────────────────────────────────────────

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        self.nodes[id.0].value.data()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].value.numel()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].value.data()[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_finite(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.is_finite()
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self, id: TensorId) -> &mut [F] {
        self.nodes[id.0].value.data_mut()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::Matmul { a: a.0, b: b.0 },
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let data = if sa == sb {
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ae = expand(self.data(a), &sa, &out_shape);
            let be = expand(self.data(b), &sb, &out_shape);
            ae.iter().zip(&be).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            op,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(F) -> F, op: Op) -> TensorId {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor { shape, data }, rg, op)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), Op::Exp { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid { a: a.0 })
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, softplus_scalar, Op::Softplus { a: a.0 })
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * sigmoid_scalar(x), Op::Silu { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(F::zero()), Op::Relu { a: a.0 })
    }

    /// Multiply by a compile-time constant (not a tape value).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let fc = F::from_f64(c);
        self.unary(a, |x| x * fc, Op::Scale { a: a.0, c })
    }

    /// Dispatch into the elementwise family by selector.
    pub fn elementwise(
        &mut self,
        op: ElemOp,
        a: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let need_rhs = matches!(op, ElemOp::Add | ElemOp::Mul | ElemOp::Sub);
        match (need_rhs, b) {
            (true, None) => Err(TensorError::Invalid(format!(
                "elementwise {op:?} requires a second operand"
            ))),
            (false, Some(_)) => Err(TensorError::Invalid(format!(
                "elementwise {op:?} is unary"
            ))),
            (true, Some(b)) => match op {
                ElemOp::Add => self.add(a, b),
                ElemOp::Mul => self.mul(a, b),
                ElemOp::Sub => self.sub(a, b),
                _ => unreachable!(),
            },
            (false, None) => Ok(match op {
                ElemOp::Exp => self.exp(a),
                ElemOp::Softplus => self.softplus(a),
                ElemOp::Silu => self.silu(a),
                ElemOp::Sigmoid => self.sigmoid(a),
                ElemOp::Neg => self.neg(a),
                ElemOp::Relu => self.relu(a),
                _ => unreachable!(),
            }),
        }
    }

    fn check_axis(
        &self,
        name: &'static str,
        a: TensorId,
        axis: Option<usize>,
    ) -> Result<(), TensorError> {
        if let Some(ax) = axis {
            let rank = self.shape(a).len();
            if ax >= rank {
                return Err(TensorError::AxisOutOfRange {
                    op: name,
                    axis: ax,
                    rank,
                });
            }
        }
        Ok(())
    }

    fn reduce_sum_data(&self, a: TensorId, axis: Option<usize>) -> (Vec<usize>, Vec<F>) {
        let shape = self.shape(a);
        let data = self.data(a);
        match axis {
            None => {
                let mut s = F::zero();
                for &v in data {
                    s += v;
                }
                (vec![1], vec![s])
            }
            Some(ax) => {
                let (outer, size, inner) = axis_layout(shape, ax);
                let out_shape = dropped_axis_shape(shape, ax);
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..size {
                        let base = (o * size + j) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            out[obase + i] += data[base + i];
                        }
                    }
                }
                (out_shape, out)
            }
        }
    }

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId, TensorError> {
        self.check_axis("sum", a, axis)?;
        let (shape, data) = self.reduce_sum_data(a, axis);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::Sum { a: a.0, axis }))
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId, TensorError> {
        self.check_axis("mean", a, axis)?;
        let count = match axis {
            None => self.numel(a),
            Some(ax) => self.shape(a)[ax],
        };
        let (shape, mut data) = self.reduce_sum_data(a, axis);
        let inv = F::one() / F::from_f64(count as f64);
        for v in &mut data {
            *v *= inv;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::Mean { a: a.0, axis }))
    }

    /// Max reduction; ties route the gradient to the first maximal position.
    pub fn max(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId, TensorError> {
        self.check_axis("max", a, axis)?;
        let shape = self.shape(a);
        let data = self.data(a);
        let (out_shape, out) = match axis {
            None => {
                let mut m = data[0];
                for &v in &data[1..] {
                    if v > m {
                        m = v;
                    }
                }
                (vec![1], vec![m])
            }
            Some(ax) => {
                let (outer, size, inner) = axis_layout(shape, ax);
                let out_shape = dropped_axis_shape(shape, ax);
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut m = data[(o * size) * inner + i];
                        for j in 1..size {
                            let v = data[(o * size + j) * inner + i];
                            if v > m {
                                m = v;
                            }
                        }
                        out[o * inner + i] = m;
                    }
                }
                (out_shape, out)
            }
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::Max { a: a.0, axis },
        ))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel_of(&shape) != self.numel(a) || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::Reshape { a: a.0 }))
    }

    /// Causal per-channel convolution: `x [T,C]`, `kernel [C,k]`, `bias [C]`.
    /// Left-padded with `k-1` zeros, so `out[t]` sees only `x[..=t]`;
    /// `kernel[c][k-1]` multiplies the current step.
    pub fn causal_depthwise_conv1d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[0] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_depthwise_conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        if sb != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_depthwise_conv1d",
                lhs: sx,
                rhs: sb,
            });
        }
        let (t_len, ch, k) = (sx[0], sx[1], sk[1]);
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![F::zero(); t_len * ch];
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = bd[c];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        acc += kd[c * k + j] * xd[src as usize * ch + c];
                    }
                }
                out[t * ch + c] = acc;
            }
        }
        let rg = self.any_requires(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            Tensor {
                shape: vec![t_len, ch],
                data: out,
            },
            rg,
            Op::CausalDepthwiseConv {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        ))
    }

    /// Full (non-depthwise) convolution with same-length zero padding:
    /// `x [T,Cin]`, `kernel [Cout,Cin,k]`, `bias [Cout]` -> `[T,Cout]`.
    /// Pads `(k-1)/2` on the left and the remainder on the right.
    pub fn conv1d_same(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                lhs: sx,
                rhs: sk,
            });
        }
        if sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                lhs: sk,
                rhs: sb,
            });
        }
        let (t_len, cin) = (sx[0], sx[1]);
        let (cout, k) = (sk[0], sk[2]);
        let left = (k - 1) / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![F::zero(); t_len * cout];
        for t in 0..t_len {
            for o in 0..cout {
                let mut acc = bd[o];
                for j in 0..k {
                    let src = t as isize - left as isize + j as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                    let krow = &kd[(o * cin * k)..];
                    for ci in 0..cin {
                        acc += krow[ci * k + j] * xrow[ci];
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        let rg = self.any_requires(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            Tensor {
                shape: vec![t_len, cout],
                data: out,
            },
            rg,
            Op::Conv1dSame {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        ))
    }

    /// Per-row RMS normalization: `x [T,d] / sqrt(mean(x^2) + eps) * weight`.
    pub fn rmsnorm(
        &mut self,
        x: TensorId,
        weight: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 2 || sw != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: sx,
                rhs: sw,
            });
        }
        let (t_len, d) = (sx[0], sx[1]);
        let xd = self.data(x);
        let wd = self.data(weight);
        let epsf = F::from_f64(eps);
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            let row = &xd[t * d..(t + 1) * d];
            let mut ms = F::zero();
            for &v in row {
                ms += v * v;
            }
            let r = (ms * inv_d + epsf).sqrt();
            for i in 0..d {
                out[t * d + i] = row[i] / r * wd[i];
            }
        }
        let rg = self.any_requires(&[x.0, weight.0]);
        Ok(self.push(
            Tensor {
                shape: vec![t_len, d],
                data: out,
            },
            rg,
            Op::RmsNorm {
                x: x.0,
                weight: weight.0,
                eps,
            },
        ))
    }

    /// Row lookup: `table [V,d]`, token ids -> `[T,d]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                lhs: st,
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid("embed: empty token sequence".into()));
        }
        for &id in ids {
            if id >= v {
                return Err(TensorError::TokenOutOfRange {
                    op: "embed",
                    id,
                    vocab: v,
                });
            }
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            rg,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// All states of `h_t = a_t ⊙ h_{t-1} + b_t`; axis 0 is time, the rest
    /// are independent lanes. The kernel chooses the evaluation strategy;
    /// the result is strategy-independent.
    pub fn scan(
        &mut self,
        a: TensorId,
        b: TensorId,
        kernel: &dyn ScanKernel<F>,
    ) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb || sa.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "scan",
                lhs: sa,
                rhs: sb,
            });
        }
        let steps = sa[0];
        let lanes = numel_of(&sa) / steps;
        let h = kernel.run(self.data(a), self.data(b), steps, lanes);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            Tensor {
                shape: sa,
                data: h,
            },
            rg,
            Op::Scan { a: a.0, b: b.0 },
        ))
    }

    /// Mean cross-entropy in nats over masked-in positions, stable
    /// log-sum-exp. `logits [T,V]`, one target id per row.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[0] || mask.len() != sl[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let (t_len, v) = (sl[0], sl[1]);
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(TensorError::Invalid(
                "cross_entropy: all positions masked out".into(),
            ));
        }
        for (t, &tok) in targets.iter().enumerate() {
            if mask[t] && tok >= v {
                return Err(TensorError::TokenOutOfRange {
                    op: "cross_entropy",
                    id: tok,
                    vocab: v,
                });
            }
        }
        let ld = self.data(logits);
        let mut total = F::zero();
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let row = &ld[t * v..(t + 1) * v];
            let mut mx = row[0];
            for &x in &row[1..] {
                if x > mx {
                    mx = x;
                }
            }
            let mut lse = F::zero();
            for &x in row {
                lse += (x - mx).exp();
            }
            let lse = lse.ln() + mx;
            total += lse - row[targets[t]];
        }
        let loss = total / F::from_f64(n_valid as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy against a raw logit, computed stably.
    pub fn bce_with_logit(
        &mut self,
        logit: TensorId,
        target: f64,
    ) -> Result<TensorId, TensorError> {
        if self.numel(logit) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(logit).to_vec(),
            });
        }
        let x = self.scalar_value(logit);
        let y = F::from_f64(target);
        // max(x,0) - x*y + ln(1 + exp(-|x|))
        let loss = x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p();
        let rg = self.nodes[logit.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogit {
                logit: logit.0,
                target,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients ADD across fan-out and across repeated `backward` calls;
    /// use [`Tape::zero_grads`] between steps.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lnode.value.shape().to_vec(),
            });
        }
        let mut tmp: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        tmp[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (src, contrib) in self.backward_op(i, &g) {
                match &mut tmp[src] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&g) {
                        *a += *c;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given upstream `g`.
    /// Inputs that do not require grad are skipped.
    fn backward_op(&self, i: usize, g: &[F]) -> Vec<(usize, Vec<F>)> {
        let mut out: Vec<(usize, Vec<F>)> = Vec::new();
        let needs = |id: usize| self.nodes[id].requires_grad;
        let val = |id: usize| self.nodes[id].value.data();
        let shp = |id: usize| self.nodes[id].value.shape();
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if needs(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if needs(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    out.push((*b, matmul_raw(&at, g, k, m, n)));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, reduce_to_shape(g, out_shape, shp(*a))));
                }
                if needs(*b) {
                    out.push((*b, reduce_to_shape(g, out_shape, shp(*b))));
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    out.push((*a, reduce_to_shape(g, out_shape, shp(*a))));
                }
                if needs(*b) {
                    let ng: Vec<F> = g.iter().map(|&x| -x).collect();
                    out.push((*b, reduce_to_shape(&ng, out_shape, shp(*b))));
                }
            }
            Op::Mul { a, b } => {
                let ae = expand(val(*a), shp(*a), out_shape);
                let be = expand(val(*b), shp(*b), out_shape);
                if needs(*a) {
                    let da: Vec<F> = g.iter().zip(&be).map(|(&x, &y)| x * y).collect();
                    out.push((*a, reduce_to_shape(&da, out_shape, shp(*a))));
                }
                if needs(*b) {
                    let db: Vec<F> = g.iter().zip(&ae).map(|(&x, &y)| x * y).collect();
                    out.push((*b, reduce_to_shape(&db, out_shape, shp(*b))));
                }
            }
            Op::Neg { a } => {
                if needs(*a) {
                    out.push((*a, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Exp { a } => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    out.push((*a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()));
                }
            }
            Op::Sigmoid { a } => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    out.push((
                        *a,
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &s)| gv * s * (F::one() - s))
                            .collect(),
                    ));
                }
            }
            Op::Softplus { a } => {
                if needs(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .zip(val(*a))
                            .map(|(&gv, &x)| gv * sigmoid_scalar(x))
                            .collect(),
                    ));
                }
            }
            Op::Silu { a } => {
                if needs(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .zip(val(*a))
                            .map(|(&gv, &x)| {
                                let s = sigmoid_scalar(x);
                                gv * (s + x * s * (F::one() - s))
                            })
                            .collect(),
                    ));
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .zip(val(*a))
                            .map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() })
                            .collect(),
                    ));
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    let fc = F::from_f64(*c);
                    out.push((*a, g.iter().map(|&x| x * fc).collect()));
                }
            }
            Op::Sum { a, axis } => {
                if needs(*a) {
                    let ishape = shp(*a);
                    let da = match axis {
                        None => vec![g[0]; numel_of(ishape)],
                        Some(ax) => {
                            let (outer, size, inner) = axis_layout(ishape, *ax);
                            let mut da = vec![F::zero(); numel_of(ishape)];
                            for o in 0..outer {
                                for j in 0..size {
                                    for ii in 0..inner {
                                        da[(o * size + j) * inner + ii] = g[o * inner + ii];
                                    }
                                }
                            }
                            da
                        }
                    };
                    out.push((*a, da));
                }
            }
            Op::Mean { a, axis } => {
                if needs(*a) {
                    let ishape = shp(*a);
                    let count = match axis {
                        None => numel_of(ishape),
                        Some(ax) => ishape[*ax],
                    };
                    let inv = F::one() / F::from_f64(count as f64);
                    let da = match axis {
                        None => vec![g[0] * inv; numel_of(ishape)],
                        Some(ax) => {
                            let (outer, size, inner) = axis_layout(ishape, *ax);
                            let mut da = vec![F::zero(); numel_of(ishape)];
                            for o in 0..outer {
                                for j in 0..size {
                                    for ii in 0..inner {
                                        da[(o * size + j) * inner + ii] = g[o * inner + ii] * inv;
                                    }
                                }
                            }
                            da
                        }
                    };
                    out.push((*a, da));
                }
            }
            Op::Max { a, axis } => {
                if needs(*a) {
                    let ishape = shp(*a);
                    let x = val(*a);
                    let mut da = vec![F::zero(); numel_of(ishape)];
                    match axis {
                        None => {
                            let mut best = 0usize;
                            for (j, &v) in x.iter().enumerate() {
                                if v > x[best] {
                                    best = j;
                                }
                            }
                            da[best] = g[0];
                        }
                        Some(ax) => {
                            let (outer, size, inner) = axis_layout(ishape, *ax);
                            for o in 0..outer {
                                for ii in 0..inner {
                                    let mut best = 0usize;
                                    for j in 1..size {
                                        if x[(o * size + j) * inner + ii]
                                            > x[(o * size + best) * inner + ii]
                                        {
                                            best = j;
                                        }
                                    }
                                    da[(o * size + best) * inner + ii] = g[o * inner + ii];
                                }
                            }
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::CausalDepthwiseConv { x, kernel, bias } => {
                let sx = shp(*x);
                let sk = shp(*kernel);
                let (t_len, ch, k) = (sx[0], sx[1], sk[1]);
                let xd = val(*x);
                let kd = val(*kernel);
                if needs(*x) {
                    let mut dx = vec![F::zero(); t_len * ch];
                    for t in 0..t_len {
                        for c in 0..ch {
                            let gv = g[t * ch + c];
                            for j in 0..k {
                                let src = t as isize - (k as isize - 1) + j as isize;
                                if src >= 0 {
                                    dx[src as usize * ch + c] += gv * kd[c * k + j];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*kernel) {
                    let mut dk = vec![F::zero(); ch * k];
                    for t in 0..t_len {
                        for c in 0..ch {
                            let gv = g[t * ch + c];
                            for j in 0..k {
                                let src = t as isize - (k as isize - 1) + j as isize;
                                if src >= 0 {
                                    dk[c * k + j] += gv * xd[src as usize * ch + c];
                                }
                            }
                        }
                    }
                    out.push((*kernel, dk));
                }
                if needs(*bias) {
                    let mut db = vec![F::zero(); ch];
                    for t in 0..t_len {
                        for c in 0..ch {
                            db[c] += g[t * ch + c];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Conv1dSame { x, kernel, bias } => {
                let sx = shp(*x);
                let sk = shp(*kernel);
                let (t_len, cin) = (sx[0], sx[1]);
                let (cout, k) = (sk[0], sk[2]);
                let left = (k - 1) / 2;
                let xd = val(*x);
                let kd = val(*kernel);
                if needs(*x) {
                    let mut dx = vec![F::zero(); t_len * cin];
                    for t in 0..t_len {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            for j in 0..k {
                                let src = t as isize - left as isize + j as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    dx[src as usize * cin + ci] += gv * kd[(o * cin + ci) * k + j];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*kernel) {
                    let mut dk = vec![F::zero(); cout * cin * k];
                    for t in 0..t_len {
                        for o in 0..cout {
                            let gv = g[t * cout + o];
                            for j in 0..k {
                                let src = t as isize - left as isize + j as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    dk[(o * cin + ci) * k + j] += gv * xd[src as usize * cin + ci];
                                }
                            }
                        }
                    }
                    out.push((*kernel, dk));
                }
                if needs(*bias) {
                    let mut db = vec![F::zero(); cout];
                    for t in 0..t_len {
                        for o in 0..cout {
                            db[o] += g[t * cout + o];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::RmsNorm { x, weight, eps } => {
                let sx = shp(*x);
                let (t_len, d) = (sx[0], sx[1]);
                let xd = val(*x);
                let wd = val(*weight);
                let epsf = F::from_f64(*eps);
                let inv_d = F::one() / F::from_f64(d as f64);
                let mut dx = vec![F::zero(); t_len * d];
                let mut dw = vec![F::zero(); d];
                for t in 0..t_len {
                    let row = &xd[t * d..(t + 1) * d];
                    let grow = &g[t * d..(t + 1) * d];
                    let mut ms = F::zero();
                    for &v in row {
                        ms += v * v;
                    }
                    let r = (ms * inv_d + epsf).sqrt();
                    let inv_r = F::one() / r;
                    // s = sum_i g_i * w_i * x_i
                    let mut s = F::zero();
                    for idx in 0..d {
                        s += grow[idx] * wd[idx] * row[idx];
                        dw[idx] += grow[idx] * row[idx] * inv_r;
                    }
                    let coef = s * inv_d * inv_r * inv_r * inv_r;
                    for idx in 0..d {
                        dx[t * d + idx] = grow[idx] * wd[idx] * inv_r - row[idx] * coef;
                    }
                }
                if needs(*x) {
                    out.push((*x, dx));
                }
                if needs(*weight) {
                    out.push((*weight, dw));
                }
            }
            Op::Embed { table, ids } => {
                if needs(*table) {
                    let st = shp(*table);
                    let (v, d) = (st[0], st[1]);
                    let mut dt = vec![F::zero(); v * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for idx in 0..d {
                            dt[id * d + idx] += g[t * d + idx];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Scan { a, b } => {
                let sa = shp(*a);
                let steps = sa[0];
                let lanes = numel_of(sa) / steps;
                let ad = val(*a);
                let h = self.nodes[i].value.data();
                // Running adjoint: r_t = g_t + a_{t+1} ⊙ r_{t+1}.
                let mut running = vec![F::zero(); lanes];
                let mut da = vec![F::zero(); steps * lanes];
                let mut db = vec![F::zero(); steps * lanes];
                for t in (0..steps).rev() {
                    let base = t * lanes;
                    for l in 0..lanes {
                        let r = g[base + l]
                            + if t + 1 < steps {
                                ad[base + lanes + l] * running[l]
                            } else {
                                F::zero()
                            };
                        running[l] = r;
                        db[base + l] = r;
                        da[base + l] = if t > 0 {
                            r * h[base - lanes + l]
                        } else {
                            F::zero()
                        };
                    }
                }
                if needs(*a) {
                    out.push((*a, da));
                }
                if needs(*b) {
                    out.push((*b, db));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if needs(*logits) {
                    let sl = shp(*logits);
                    let (t_len, v) = (sl[0], sl[1]);
                    let ld = val(*logits);
                    let n_valid = mask.iter().filter(|&&m| m).count();
                    let scale = g[0] / F::from_f64(n_valid as f64);
                    let mut dl = vec![F::zero(); t_len * v];
                    for t in 0..t_len {
                        if !mask[t] {
                            continue;
                        }
                        let row = &ld[t * v..(t + 1) * v];
                        let mut mx = row[0];
                        for &xv in &row[1..] {
                            if xv > mx {
                                mx = xv;
                            }
                        }
                        let mut denom = F::zero();
                        for (j, &xv) in row.iter().enumerate() {
                            let e = (xv - mx).exp();
                            dl[t * v + j] = e;
                            denom += e;
                        }
                        for j in 0..v {
                            let p = dl[t * v + j] / denom;
                            let delta = if j == targets[t] { F::one() } else { F::zero() };
                            dl[t * v + j] = scale * (p - delta);
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::BceWithLogit { logit, target } => {
                if needs(*logit) {
                    let x = val(*logit)[0];
                    let y = F::from_f64(*target);
                    out.push((*logit, vec![g[0] * (sigmoid_scalar(x) - y)]));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    fn leaf(tape: &mut T64, shape: Vec<usize>, data: &[f64]) -> TensorId {
        tape.leaf(Tensor::from_f64s(shape, data).unwrap(), true)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = T64::new();
        let i2 = leaf(&mut tape, vec![2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = leaf(&mut tape, vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![1, 2], &[1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], &[3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], &[0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softplus_and_silu_closed_forms() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![2], &[0.0, 0.0]);
        let sp = tape.softplus(x);
        assert!((tape.data(sp)[0] - 2.0f64.ln()).abs() < 1e-15);
        let si = tape.silu(x);
        assert_eq!(tape.data(si)[0], 0.0);
    }

    #[test]
    fn softplus_no_overflow_at_1e4() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![1], &[1e4]);
        let y = tape.softplus(x);
        assert_eq!(tape.data(y)[0], 1e4);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 1.0);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = T64::new();
        let v = leaf(&mut tape, vec![3], &[1.0, 2.0, 3.0]);
        let m = tape.mean(v, None).unwrap();
        assert_eq!(tape.data(m), &[2.0]);

        let ones = leaf(&mut tape, vec![2, 3], &[1.0; 6]);
        let s = tape.sum(ones, Some(0)).unwrap();
        assert_eq!(tape.shape(s), &[3]);
        assert_eq!(tape.data(s), &[2.0, 2.0, 2.0]);

        let bad = tape.sum(ones, Some(2));
        assert!(matches!(bad, Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut tape = T64::new();
        let v = leaf(&mut tape, vec![2], &[5.0, 5.0]);
        let m = tape.max(v, None).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn causal_conv_identity_kernel() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![4, 2], &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
        let k = leaf(&mut tape, vec![2, 1], &[1.0, 1.0]);
        let b = leaf(&mut tape, vec![2], &[0.0, 0.0]);
        let y = tape.causal_depthwise_conv1d(x, k, b).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn causal_conv_hand_case() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![3, 1], &[1.0, 2.0, 3.0]);
        let k = leaf(&mut tape, vec![1, 2], &[1.0, 1.0]);
        let b = leaf(&mut tape, vec![1], &[0.0]);
        let y = tape.causal_depthwise_conv1d(x, k, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn causal_conv_channel_mismatch() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![3, 2], &[0.0; 6]);
        let k = leaf(&mut tape, vec![3, 2], &[0.0; 6]);
        let b = leaf(&mut tape, vec![2], &[0.0; 2]);
        assert!(tape.causal_depthwise_conv1d(x, k, b).is_err());
    }

    #[test]
    fn rmsnorm_constant_row() {
        let mut tape = T64::new();
        let c = 3.5;
        let x = leaf(&mut tape, vec![1, 4], &[c; 4]);
        let w = leaf(&mut tape, vec![4], &[1.0; 4]);
        let y = tape.rmsnorm(x, w, 1e-12).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsnorm_zero_row_stays_finite() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![1, 3], &[0.0; 3]);
        let w = leaf(&mut tape, vec![3], &[1.0; 3]);
        let y = tape.rmsnorm(x, w, 1e-5).unwrap();
        assert!(tape.is_finite(y));
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![2], &[1.0, 2.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![2], &[3.0, -1.0]);
        let y = tape.add(w, w).unwrap();
        let loss = tape.sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_doubles_without_reset() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![1], &[2.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[8.0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![2], &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let empty: T64 = Tape::new();
        drop(empty);
        let mut t2: T64 = Tape::new();
        assert!(matches!(
            t2.backward(TensorId(0)),
            Err(TensorError::EmptyTape)
        ));
    }

    #[test]
    fn broadcast_add_and_incompatible() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut tape, vec![3], &[10.0, 20.0, 30.0]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let c = leaf(&mut tape, vec![2], &[1.0, 2.0]);
        assert!(matches!(
            tape.add(a, c),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_never_aliases_inputs() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2], &[1.0, 1.0]);
        let y = tape.add(a, b).unwrap();
        let before = tape.data(a).to_vec();
        for v in tape.data_mut(y) {
            *v = 99.0;
        }
        assert_eq!(tape.data(a), &before[..]);
        assert_eq!(tape.data(b), &[1.0, 1.0]);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut tape = T64::new();
        let table = leaf(&mut tape, vec![3, 2], &[0.0; 6]);
        let err = tape.embed(table, &[0, 5]).unwrap_err();
        assert!(matches!(err, TensorError::TokenOutOfRange { id: 5, .. }));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = T64::new();
        let v = 25;
        let logits = leaf(&mut tape, vec![3, v], &vec![0.7; 3 * v]);
        let loss = tape
            .cross_entropy(logits, &[1, 2, 3], &[true, true, true])
            .unwrap();
        assert!((tape.scalar_value(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_masked_errors() {
        let mut tape = T64::new();
        let logits = leaf(&mut tape, vec![2, 4], &[0.0; 8]);
        assert!(tape.cross_entropy(logits, &[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn bce_closed_form() {
        let mut tape = T64::new();
        let logit = leaf(&mut tape, vec![1], &[0.0]);
        let loss = tape.bce_with_logit(logit, 1.0).unwrap();
        assert!((tape.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-15);
        tape.backward(loss).unwrap();
        // d/dx = sigmoid(0) - 1 = -0.5
        assert!((tape.grad(logit).unwrap()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn elementwise_dispatch_contract() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2], &[1.0, -1.0]);
        let b = leaf(&mut tape, vec![2], &[2.0, 2.0]);
        let y = tape.elementwise(ElemOp::Add, a, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[3.0, 1.0]);
        assert!(tape.elementwise(ElemOp::Add, a, None).is_err());
        assert!(tape.elementwise(ElemOp::Exp, a, Some(b)).is_err());
        let e = tape.elementwise(ElemOp::Exp, a, None).unwrap();
        assert!((tape.data(e)[0] - 1.0f64.exp()).abs() < 1e-15);
    }
}
