//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are evaluated eagerly and their values cached on a [`Tape`].
//! Node indices are handed out in recording order, so every parent precedes
//! its child and the reverse pass is a single sweep from the root downwards.
//!
//! Only the primitives needed to unroll a tanh network inside an explicit
//! integrator are supported: add, sub, scale, matmul, hadamard, tanh, square
//! and sum. Elementwise binary ops accept equal shapes or a 1x1 operand,
//! which is broadcast.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "tensor of shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "leaf",
                index,
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: pool::zeroed(rows * cols),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Result<Self> {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    /// Multiply by a constant.
    Scale(f64),
    MatMul,
    Hadamard,
    Tanh,
    Square,
    /// Sum of all entries, producing a 1x1 node.
    Sum,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Hadamard => "hadamard",
            Op::Tanh => "tanh",
            Op::Square => "square",
            Op::Sum => "sum",
        }
    }

    fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::MatMul | Op::Hadamard => 2,
            Op::Scale(_) | Op::Tanh | Op::Square | Op::Sum => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Param,
    Constant,
    Unary(Op, NodeId),
    Binary(Op, NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    kind: Kind,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf.
pub type Gradients = BTreeMap<NodeId, Tensor>;

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Param, value, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, Kind::Param))
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, kind: Kind, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "node {} is not on this tape ({} nodes)",
                id.0,
                self.nodes.len()
            )))
        }
    }

    /// Records `op` applied to `parents` and returns the new node.
    pub fn record(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        if parents.len() != op.arity() {
            return Err(Error::contract(format!(
                "{} takes {} operand(s), got {}",
                op.name(),
                op.arity(),
                parents.len()
            )));
        }
        for &p in parents {
            self.check_id(p)?;
        }
        let value = match op.arity() {
            1 => unary_forward(op, &self.nodes[parents[0].0].value),
            _ => binary_forward(
                op,
                &self.nodes[parents[0].0].value,
                &self.nodes[parents[1].0].value,
            )?,
        };
        if let Some(index) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let kind = if parents.len() == 1 {
            Kind::Unary(op, parents[0])
        } else {
            Kind::Binary(op, parents[0], parents[1])
        };
        Ok(self.push(kind, value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Hadamard, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }

    /// Reverse sweep from a 1x1 root. Every parameter leaf gets an entry;
    /// leaves the root does not depend on get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check_id(root)?;
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, node {} has shape {}x{}",
                root.0, root_shape.0, root_shape.1
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.kind, grads[i].take()) {
                (Kind::Param, g) => {
                    grads[i] = g;
                    continue;
                }
                (Kind::Constant, _) | (_, None) => continue,
                (_, Some(g)) => g,
            };
            match node.kind {
                Kind::Unary(op, a) => {
                    if self.nodes[a.0].requires_grad {
                        let av = &self.nodes[a.0].value;
                        unary_backward(op, av, &node.value, &g, slot(&mut grads, a, av));
                    }
                }
                Kind::Binary(op, a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        binary_backward(op, Side::Left, av, bv, &g, slot(&mut grads, a, av));
                    }
                    if self.nodes[b.0].requires_grad {
                        binary_backward(op, Side::Right, av, bv, &g, slot(&mut grads, b, bv));
                    }
                }
                Kind::Param | Kind::Constant => unreachable!(),
            }
            pool::recycle(g.data);
        }

        let mut out = Gradients::new();
        for id in self.params() {
            let (r, c) = self.shape(id);
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(r, c));
            out.insert(id, g);
        }
        grads.into_iter().flatten().for_each(|t| pool::recycle(t.data));
        Ok(out)
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::recycle(node.value.data);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

fn map<F: Fn(f64) -> f64>(a: &Tensor, f: F) -> Tensor {
    let mut data = pool::empty(a.data.len());
    data.extend(a.data.iter().map(|&x| f(x)));
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

fn unary_forward(op: Op, a: &Tensor) -> Tensor {
    match op {
        Op::Scale(c) => map(a, |x| c * x),
        Op::Tanh => map(a, tanh),
        Op::Square => map(a, |x| x * x),
        Op::Sum => Tensor::scalar(a.data.iter().sum()),
        _ => unreachable!("binary op in unary_forward"),
    }
}

fn binary_forward(op: Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::Dimension {
        op: op.name(),
        lhs: a.shape(),
        rhs: b.shape(),
    };
    if op == Op::MatMul {
        if a.cols != b.rows {
            return Err(mismatch());
        }
        let mut out = Tensor::zeros(a.rows, b.cols);
        gemm(
            (a.rows, a.cols, b.cols),
            (&a.data, a.cols, 1),
            (&b.data, b.cols, 1),
            &mut out.data,
        );
        return Ok(out);
    }
    match op {
        Op::Add => zip_with(a, b, |x, y| x + y).ok_or_else(mismatch),
        Op::Sub => zip_with(a, b, |x, y| x - y).ok_or_else(mismatch),
        Op::Hadamard => zip_with(a, b, |x, y| x * y).ok_or_else(mismatch),
        _ => unreachable!("unary op in binary_forward"),
    }
}

/// Elementwise combination with 1x1 broadcast; `None` on nonconforming shapes.
fn zip_with<F: Fn(f64, f64) -> f64>(a: &Tensor, b: &Tensor, f: F) -> Option<Tensor> {
    let (rows, cols, data) = if a.shape() == b.shape() {
        let mut data = pool::empty(a.data.len());
        data.extend(a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        (a.rows, a.cols, data)
    } else if b.is_scalar() {
        let y = b.data[0];
        let mut data = pool::empty(a.data.len());
        data.extend(a.data.iter().map(|&x| f(x, y)));
        (a.rows, a.cols, data)
    } else if a.is_scalar() {
        let x = a.data[0];
        let mut data = pool::empty(b.data.len());
        data.extend(b.data.iter().map(|&y| f(x, y)));
        (b.rows, b.cols, data)
    } else {
        return None;
    };
    Some(Tensor { rows, cols, data })
}

fn unary_backward(op: Op, a: &Tensor, out: &Tensor, g: &Tensor, ga: &mut Tensor) {
    match op {
        Op::Scale(c) => {
            for (s, &gi) in ga.data.iter_mut().zip(&g.data) {
                *s += c * gi;
            }
        }
        Op::Tanh => {
            for ((s, &gi), &y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                *s += gi * (1.0 - y * y);
            }
        }
        Op::Square => {
            for ((s, &gi), &x) in ga.data.iter_mut().zip(&g.data).zip(&a.data) {
                *s += 2.0 * x * gi;
            }
        }
        Op::Sum => {
            let g0 = g.data[0];
            for s in ga.data.iter_mut() {
                *s += g0;
            }
        }
        _ => unreachable!(),
    }
}

fn binary_backward(op: Op, side: Side, a: &Tensor, b: &Tensor, g: &Tensor, acc: &mut Tensor) {
    if op == Op::MatMul {
        match side {
            // dA += G * B^T
            Side::Left => gemm(
                (a.rows, b.cols, a.cols),
                (&g.data, g.cols, 1),
                (&b.data, 1, b.cols),
                &mut acc.data,
            ),
            // dB += A^T * G
            Side::Right => gemm(
                (b.rows, a.rows, b.cols),
                (&a.data, 1, a.cols),
                (&g.data, g.cols, 1),
                &mut acc.data,
            ),
        }
        return;
    }

    let (this, other) = match side {
        Side::Left => (a, b),
        Side::Right => (b, a),
    };
    let sign = if op == Op::Sub && side == Side::Right {
        -1.0
    } else {
        1.0
    };
    // local derivative of the output entry with respect to this operand
    let local = |k: usize| -> f64 {
        match op {
            Op::Hadamard => {
                if other.is_scalar() {
                    other.data[0]
                } else {
                    other.data[k]
                }
            }
            _ => sign,
        }
    };
    if this.shape() == g.shape() {
        for (k, (s, &gi)) in acc.data.iter_mut().zip(&g.data).enumerate() {
            *s += gi * local(k);
        }
    } else {
        // broadcast scalar operand: reduce over the output
        let total: f64 = g.data.iter().enumerate().map(|(k, &gi)| gi * local(k)).sum();
        acc.data[0] += total;
    }
}

/// `tanh(x) = -e / (2 + e)` with `e = expm1(-2|x|)`, sign restored.
///
/// Hidden-layer activations dominate a training step and libm's `tanh` is
/// several times slower than this branch-free form. Relative error stays
/// within a few ulps of the correctly rounded value.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = expm1_nonpositive(-2.0 * x.abs());
    (-e / (2.0 + e)).copysign(x)
}

/// `exp(y) - 1` for `y <= 0`.
///
/// Writes `y = k ln2 + r` with `|r| <= ln2 / 2` and evaluates
/// `2^k (1 + p(r)) - 1` as `s p + (s - 1)`, which is exact in `s - 1` and
/// reduces to `p` itself when `k = 0`, so small arguments lose nothing to
/// cancellation. `p` is the Taylor polynomial of `expm1` through `r^13`.
#[inline]
fn expm1_nonpositive(y: f64) -> f64 {
    // adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits
    const ROUND: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1/13!, 1/12!, ..., 1/3!, 1/2!
    const C: [f64; 12] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
    ];
    // below -40, exp(y) is under 1e-17 and the result is -1 either way
    let y = y.max(-40.0);
    let t = y * std::f64::consts::LOG2_E + ROUND;
    let k = t - ROUND;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let two_k = t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(1023) << 52;
    let s = f64::from_bits(two_k);
    let q = C[1..].iter().fold(C[0], |q, &c| q * r + c);
    let p = r + r * r * q;
    s * p + (s - 1.0)
}

/// Per-thread free lists of tensor storage keyed by length.
///
/// An unrolled residual allocates the same large buffers every optimizer
/// step; handing them back to the system allocator and faulting fresh pages
/// in again was measured to cost about a third of a training step.
mod pool {
    use std::cell::RefCell;
    use std::collections::BTreeMap;

    /// Buffers shorter than this go straight back to the allocator.
    const MIN_LEN: usize = 512;
    /// Upper bound on retained storage per thread, in `f64` entries (1 GiB).
    const MAX_RETAINED: usize = 1 << 27;

    #[derive(Default)]
    struct Free {
        retained: usize,
        buckets: BTreeMap<usize, Vec<Vec<f64>>>,
    }

    thread_local! {
        static FREE: RefCell<Free> = RefCell::new(Free::default());
    }

    fn take(len: usize) -> Option<Vec<f64>> {
        if len < MIN_LEN {
            return None;
        }
        FREE.try_with(|f| {
            let mut f = f.borrow_mut();
            let v = f.buckets.get_mut(&len)?.pop()?;
            f.retained -= len;
            Some(v)
        })
        .ok()
        .flatten()
    }

    /// Empty vector with capacity for `len` entries.
    pub(super) fn empty(len: usize) -> Vec<f64> {
        match take(len) {
            Some(mut v) => {
                v.clear();
                v
            }
            None => Vec::with_capacity(len),
        }
    }

    pub(super) fn zeroed(len: usize) -> Vec<f64> {
        match take(len) {
            Some(mut v) => {
                v.clear();
                v.resize(len, 0.0);
                v
            }
            None => vec![0.0; len],
        }
    }

    pub(super) fn recycle(v: Vec<f64>) {
        let len = v.capacity();
        if len < MIN_LEN {
            return;
        }
        let _ = FREE.try_with(|f| {
            let mut f = f.borrow_mut();
            if f.retained + len <= MAX_RETAINED {
                f.retained += len;
                f.buckets.entry(len).or_default().push(v);
            }
        });
    }
}

/// `c += a * b` for an (m x k) by (k x n) product. Operands are given as
/// slices plus (row stride, col stride), so transposed views cost nothing.
///
/// Every product in this crate has one tiny dimension (the state size), so
/// two plain loop orders cover it: row axpys when `b` has contiguous rows,
/// otherwise dot products along contiguous rows of `a` and columns of `b`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if csb == 1 {
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                let brow = &b[p * rsb..p * rsb + n];
                row.iter_mut().zip(brow).for_each(|(cij, &bpj)| *cij += aip * bpj);
            }
        }
    } else if csa == 1 && rsb == 1 {
        for i in 0..m {
            let arow = &a[i * rsa..i * rsa + k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * csb..j * csb + k]);
            }
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                for j in 0..n {
                    c[i * n + j] += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}

/// Dot product with four independent partial sums, combined in a fixed order.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (xs, ys) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += xs[l] * ys[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + step;
        let up = f(&point)?;
        point[i] = theta[i] - step;
        let down = f(&point)?;
        point[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Eval(format!("objective not finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_of_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g[&x].data(), &[1.0]);
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 1));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), (2, 1));

        let bad = tape.constant(Tensor::zeros(2, 1));
        match tape.matmul(a, bad) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 1));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g[&x].data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g[&unused], Tensor::zeros(2, 2));
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::scalar(2.0));
        let v = tape.param(t(1, 3, &[1.0, 2.0, 3.0]));
        let p = tape.hadamard(s, v).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let d = tape.sub(p, s).unwrap();
        let total = tape.sum(d).unwrap();
        let g = tape.backward(total).unwrap();
        // d/ds sum(s*v - s) = sum(v) - 3
        assert_eq!(g[&s].data(), &[3.0]);
        assert_eq!(g[&v].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 2));
        let b = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { op: "add", .. })));
    }

    #[test]
    fn non_finite_values_are_errors() {
        assert!(matches!(
            Tensor::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e200));
        assert!(matches!(tape.square(a), Err(Error::NonFinite { op: "square", .. })));
    }

    #[test]
    fn matmul_gradient_by_hand() {
        // f = sum(A x), df/dA = 1 x^T, df/dx = A^T 1
        let mut tape = Tape::new();
        let a = tape.param(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = tape.param(t(3, 1, &[0.5, -1.0, 2.0]));
        let y = tape.matmul(a, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g[&a].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(g[&x].data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let g = finite_diff_gradient(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = finite_diff_gradient(|_| Ok(4.2), &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_sine_within_taylor_bound() {
        let step = 1e-3;
        let g = finite_diff_gradient(|p| Ok(p[0].sin()), &[0.0], step).unwrap();
        // remainder of the central difference is step^2/6 * |cos'''| <= step^2
        assert!((g[0] - 1.0).abs() <= step * step);
    }

    #[test]
    fn fd_rejects_bad_step_and_non_finite() {
        assert!(finite_diff_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_gradient(|_| Ok(f64::INFINITY), &[1.0], 1e-3),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn tanh_tracks_libm() {
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let u = i as f64 / 200_000.0 * 60.0 - 30.0;
            for x in [u, u * 1e-3, u * 1e-9] {
                let exact = x.tanh();
                if exact != 0.0 {
                    worst = worst.max(((tanh(x) - exact) / exact).abs());
                }
            }
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst:e}");
        assert_eq!(tanh(0.0), 0.0);
        assert!(tanh(-0.0).is_sign_negative());
        assert_eq!(tanh(1e-310), 1e-310);
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }
}
