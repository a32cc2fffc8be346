//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; node `i` only ever
//! references nodes `< i`, so the tape is topologically ordered by
//! construction. Leaf values can be overwritten with [`Tape::set_leaf`] and the
//! whole tape re-evaluated with [`Tape::replay`]; anything computed outside
//! the tape and fed in as a constant stays frozen across replays.

use super::linalg::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Divide by a one-element tensor.
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize),
    MinAxis(Var, usize),
    Softmax(Var, f64),
    LogSoftmax(Var),
    LogSumExp(Var),
    Pick(Var, Vec<usize>),
    MinExcluding(Var, Vec<usize>),
    SqDist(Var, Var),
    Center(Var),
    Reshape(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | BatchMatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | DivScalar(a, b) | SqDist(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Scale(a, _)
            | AddConst(a, _)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Relu(a)
            | Square(a)
            | Sum(a)
            | Mean(a)
            | SumAxis(a, _)
            | MeanAxis(a, _)
            | MaxAxis(a, _)
            | MinAxis(a, _)
            | Softmax(a, _)
            | LogSoftmax(a)
            | LogSumExp(a)
            | Pick(a, _)
            | MinExcluding(a, _)
            | Center(a)
            | Reshape(a, _)
            | GatherRows(a, _) => vec![*a],
            ConcatRows(vs) => vs.clone(),
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Selected indices for max/min style reductions.
    arg: Vec<usize>,
}

/// Recorded computation. Build a fresh one per step.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Clone, Debug)]
pub struct GradientReport {
    grads: Vec<(Var, Tensor)>,
    /// Filled in by finite-difference checks; `None` for a plain backward pass.
    pub max_rel_error: Option<f64>,
}

impl GradientReport {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    /// Gradient for `v`; panics if `v` is not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for this variable")
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Splits `shape` around `axis` into (outer, mid, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Row softmax over the last axis of a flat buffer with row length `k`.
fn softmax_rows(x: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - m) / temperature).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

fn logsumexp_rows(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks_exact(k)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Sum in ascending order, so the result depends only on the multiset of values.
pub fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Mean computed as `min + Σ(x - min)/n` with an ordered sum: exact when all
/// entries are equal and independent of iteration order.
fn shifted_mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        return 0.0;
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    lo + ordered_sum(v.into_iter().map(|x| x - lo).collect()) / n as f64
}

/// Double centering `H X H` of a square matrix, `H = I - 11ᵀ/m`.
///
/// Uses shifted, ordered means: a constant matrix centers to exactly zero and a
/// symmetric row/column permutation of `x` permutes the result exactly.
pub fn double_center(x: &Tensor) -> Tensor {
    let m = x.shape()[0];
    let d = x.data();
    let row: Vec<f64> = (0..m).map(|i| shifted_mean(d[i * m..(i + 1) * m].iter().copied(), m)).collect();
    let col: Vec<f64> = (0..m).map(|j| shifted_mean((0..m).map(|i| d[i * m + j]), m)).collect();
    let total = shifted_mean(d.iter().copied(), m * m);
    Tensor::from_fn(&[m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        d[idx] - row[i] - col[j] + total
    })
}

/// Squared Euclidean distances between rows of `a` (`n×c`) and `b` (`k×c`).
pub fn sq_dist(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, c) = (a.shape()[0], b.shape()[0], a.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    Tensor::from_fn(&[n, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        ad[i * c..(i + 1) * c].iter().zip(&bd[j * c..(j + 1) * c]).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, arg: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Overwrites a leaf value; call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(contract_err!("set_leaf on non-leaf node {}", v.0));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err!("set_leaf shape {:?} != {:?}", value.shape(), node.value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, arg) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].arg = arg;
        }
        Ok(())
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, arg) = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, arg });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Vec<usize>)> {
        use Op::*;
        let plain = |t: Tensor| Ok((t, Vec::new()));
        match op {
            Leaf => unreachable!("leaves are never evaluated"),
            MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
                plain(Tensor::new(&[m, n], out)?)
            }
            BatchMatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                    return Err(shape_err!("batch matmul {:?} x {:?}", a.shape(), b.shape()));
                }
                let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let mut out = vec![0.0; bs * m * n];
                for i in 0..bs {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                plain(Tensor::new(&[bs, m, n], out)?)
            }
            Transpose(a) => {
                let a = self.val(*a);
                if a.rank() != 2 {
                    return Err(shape_err!("transpose needs a matrix, got {:?}", a.shape()));
                }
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let d = a.data();
                plain(Tensor::from_fn(&[c, r], |idx| d[(idx % r) * c + idx / r]))
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return Err(shape_err!("elementwise {:?} vs {:?}", x.shape(), y.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Add(..) => |p, q| p + q,
                    Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                plain(Tensor::new(x.shape(), data)?)
            }
            DivScalar(a, s) => {
                let s = self.val(*s).item()?;
                plain(self.val(*a).map(|v| v / s))
            }
            Scale(a, c) => plain(self.val(*a).map(|v| v * c)),
            AddConst(a, c) => plain(self.val(*a).map(|v| v + c)),
            Exp(a) => plain(self.val(*a).map(f64::exp)),
            Ln(a) => plain(self.val(*a).map(f64::ln)),
            Sqrt(a) => plain(self.val(*a).map(f64::sqrt)),
            Relu(a) => plain(self.val(*a).map(|v| v.max(0.0))),
            Square(a) => plain(self.val(*a).map(|v| v * v)),
            Sum(a) => plain(Tensor::scalar(self.val(*a).sum())),
            Mean(a) => {
                let a = self.val(*a);
                plain(Tensor::scalar(a.sum() / a.len() as f64))
            }
            SumAxis(a, axis) | MeanAxis(a, axis) => {
                let a = self.val(*a);
                if *axis >= a.rank() {
                    return Err(shape_err!("axis {axis} out of range for {:?}", a.shape()));
                }
                let (outer, mid, inner) = split_axis(a.shape(), *axis);
                let scale = if matches!(op, MeanAxis(..)) { 1.0 / mid as f64 } else { 1.0 };
                let d = a.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= scale);
                plain(Tensor::new(&removed_axis(a.shape(), *axis), out)?)
            }
            MaxAxis(a, axis) | MinAxis(a, axis) => {
                let a = self.val(*a);
                if *axis >= a.rank() {
                    return Err(shape_err!("axis {axis} out of range for {:?}", a.shape()));
                }
                let is_max = matches!(op, MaxAxis(..));
                let (outer, mid, inner) = split_axis(a.shape(), *axis);
                let d = a.data();
                let mut out = vec![0.0; outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = d[o * mid * inner + i];
                        let mut bi = 0;
                        for m in 1..mid {
                            let v = d[(o * mid + m) * inner + i];
                            // strict comparison keeps the first index on ties
                            if (is_max && v > best) || (!is_max && v < best) {
                                best = v;
                                bi = m;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = bi;
                    }
                }
                Ok((Tensor::new(&removed_axis(a.shape(), *axis), out)?, arg))
            }
            Softmax(a, t) => {
                let a = self.val(*a);
                let k = *a.shape().last().unwrap_or(&1);
                plain(Tensor::new(a.shape(), softmax_rows(a.data(), k, *t))?)
            }
            LogSoftmax(a) => {
                let a = self.val(*a);
                let k = *a.shape().last().unwrap_or(&1);
                let lse = logsumexp_rows(a.data(), k);
                let data = a.data().iter().enumerate().map(|(i, v)| v - lse[i / k]).collect();
                plain(Tensor::new(a.shape(), data)?)
            }
            LogSumExp(a) => {
                let a = self.val(*a);
                let k = *a.shape().last().unwrap_or(&1);
                let shape = &a.shape()[..a.rank().saturating_sub(1)];
                plain(Tensor::new(shape, logsumexp_rows(a.data(), k))?)
            }
            Pick(a, idx) => {
                let a = self.val(*a);
                if a.rank() < 2 || idx.len() != a.shape()[0] {
                    return Err(shape_err!("pick {} indices from {:?}", idx.len(), a.shape()));
                }
                let k = *a.shape().last().unwrap();
                if let Some(bad) = idx.iter().find(|&&j| j >= k) {
                    return Err(contract_err!("pick index {bad} out of range for {k} classes"));
                }
                let per = a.len() / idx.len() / k;
                let d = a.data();
                let mut out = Vec::with_capacity(idx.len() * per);
                for (n, &j) in idx.iter().enumerate() {
                    for r in 0..per {
                        out.push(d[(n * per + r) * k + j]);
                    }
                }
                plain(Tensor::new(&a.shape()[..a.rank() - 1], out)?)
            }
            MinExcluding(a, idx) => {
                let a = self.val(*a);
                if a.rank() != 2 || idx.len() != a.shape()[0] {
                    return Err(shape_err!("min_excluding {} on {:?}", idx.len(), a.shape()));
                }
                let k = a.shape()[1];
                if k < 2 {
                    return Err(contract_err!("min_excluding needs at least two columns"));
                }
                let mut out = Vec::with_capacity(idx.len());
                let mut arg = Vec::with_capacity(idx.len());
                for (n, &skip) in idx.iter().enumerate() {
                    let row = a.row(n);
                    let (bi, bv) = row.iter().enumerate().filter(|(j, _)| *j != skip).fold(
                        (usize::MAX, f64::INFINITY),
                        |(bi, bv), (j, &v)| {
                            if v < bv {
                                (j, v)
                            } else {
                                (bi, bv)
                            }
                        },
                    );
                    out.push(bv);
                    arg.push(bi);
                }
                Ok((Tensor::new(&[idx.len()], out)?, arg))
            }
            SqDist(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                    return Err(shape_err!("sq_dist {:?} vs {:?}", a.shape(), b.shape()));
                }
                plain(sq_dist(a, b))
            }
            Center(a) => {
                let a = self.val(*a);
                if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
                    return Err(shape_err!("center needs a square matrix, got {:?}", a.shape()));
                }
                plain(double_center(a))
            }
            Reshape(a, shape) => plain(self.val(*a).clone().reshape(shape)?),
            GatherRows(a, idx) => {
                let a = self.val(*a);
                let r = a.rows();
                if let Some(bad) = idx.iter().find(|&&i| i >= r) {
                    return Err(shape_err!("gather row {bad} of {r}"));
                }
                let c = a.cols();
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    out.extend_from_slice(a.row(i));
                }
                let mut shape = a.shape().to_vec();
                shape[0] = idx.len();
                plain(Tensor::new(&shape, out)?)
            }
            ConcatRows(vs) => {
                let first = self.val(vs[0]);
                let tail = &first.shape()[1..];
                let mut out = Vec::new();
                let mut rows = 0;
                for v in vs {
                    let t = self.val(*v);
                    if &t.shape()[1..] != tail {
                        return Err(shape_err!("concat {:?} onto {:?}", t.shape(), first.shape()));
                    }
                    rows += t.shape()[0];
                    out.extend_from_slice(t.data());
                }
                let mut shape = first.shape().to_vec();
                shape[0] = rows;
                plain(Tensor::new(&shape, out)?)
            }
            Conv2d { x, w, b, stride, pad } => {
                let g = self.conv_geom(*x, *w, *b, *stride, *pad)?;
                let cols = im2col(self.val(*x).data(), &g);
                let rows = g.out_rows();
                let mut out = vec![0.0; rows * g.cout];
                let bias = self.val(*b).data();
                for r in out.chunks_exact_mut(g.cout) {
                    r.copy_from_slice(bias);
                }
                gemm(rows, g.patch_len(), g.cout, &cols, false, self.val(*w).data(), false, &mut out, true);
                plain(Tensor::new(&[g.n, g.out_h(), g.out_w(), g.cout], out)?)
            }
        }
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs != [ws[3]] || ws[2] != xs[3] || stride == 0 {
            return Err(shape_err!("conv2d input {xs:?} weight {ws:?} bias {bs:?}"));
        }
        if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[1] {
            return Err(shape_err!("conv2d kernel {ws:?} larger than padded input {xs:?}"));
        }
        Ok(ConvGeom { n: xs[0], h: xs[1], w: xs[2], cin: xs[3], kh: ws[0], kw: ws[1], cout: ws[3], stride, pad })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::BatchMatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    /// Divides every entry of `a` by the single value held in `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("divisor must hold one value, got {:?}", self.shape(s)));
        }
        self.record(Op::DivScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddConst(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::MeanAxis(a, axis))
    }

    /// Max along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::MaxAxis(a, axis))
    }

    /// Min along `axis`; the gradient goes to the first minimal entry.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::MinAxis(a, axis))
    }

    /// Softmax over the last axis of `a / temperature`, max-shifted.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(contract_err!("softmax temperature must be positive, got {temperature}"));
        }
        self.record(Op::Softmax(a, temperature))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSumExp(a))
    }

    /// For `a` of shape `[N, ..., K]`, selects index `idx[n]` along the last
    /// axis for each leading item, giving `[N, ...]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::Pick(a, idx.to_vec()))
    }

    /// Row-wise minimum of an `[N,K]` matrix skipping column `idx[n]` in row `n`.
    pub fn min_excluding(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::MinExcluding(a, idx.to_vec()))
    }

    /// Pairwise squared distances between rows, `[n,c] x [k,c] -> [n,k]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::SqDist(a, b))
    }

    /// `H A H` with the centering matrix `H = I - 11ᵀ/m`.
    pub fn center(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Center(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of nothing"));
        }
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    /// NHWC convolution with HWIO weights and a per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Conv2d { x, w, b, stride, pad })
    }

    /// Reverse pass from a one-element output. Every differentiable leaf gets
    /// an entry; leaves the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Result<GradientReport> {
        if self.value(output).len() != 1 {
            return Err(contract_err!("backward needs a scalar output, got shape {:?}", self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(self.shape(output), vec![1.0])?);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            // keep nothing for interior nodes
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(GradientReport { grads: leaves, max_rel_error: None })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        use Op::*;
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
            f(slot.data_mut());
        };
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &|d| gemm(m, n, k, gd, false, bv.data(), true, d, true));
                acc(*b, &|d| gemm(k, m, n, av.data(), true, gd, false, d, true));
            }
            BatchMatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                acc(*a, &|d| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &|d| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Add(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
            }
            Sub(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            DivScalar(a, s) => {
                let sv = self.val(*s).item()?;
                let av = self.val(*a).data();
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g / sv));
                let ds: f64 = av.iter().zip(gd).map(|(x, g)| -g * x / (sv * sv)).sum();
                acc(*s, &|d| d[0] += ds);
            }
            Scale(a, c) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * c)),
            AddConst(a, _) | Reshape(a, _) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g)),
            Exp(a) => {
                let y = node.value.data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i];
                    }
                });
            }
            Ln(a) => {
                let x = self.val(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] / x[i];
                    }
                });
            }
            Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] / (2.0 * y[i]);
                    }
                });
            }
            Relu(a) => {
                let x = self.val(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Square(a) => {
                let x = self.val(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * x[i] * gd[i];
                    }
                });
            }
            Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0])),
            Mean(a) => {
                let n = self.val(*a).len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            SumAxis(a, axis) | MeanAxis(a, axis) => {
                let (outer, mid, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, MeanAxis(..)) { 1.0 / mid as f64 } else { 1.0 };
                acc(*a, &|d| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                d[base + i] += gd[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            MaxAxis(a, axis) | MinAxis(a, axis) => {
                let (outer, mid, inner) = split_axis(self.shape(*a), *axis);
                let arg = &node.arg;
                acc(*a, &|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let m = arg[o * inner + i];
                            d[(o * mid + m) * inner + i] += gd[o * inner + i];
                        }
                    }
                });
            }
            Softmax(a, t) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|d| {
                    for r in 0..y.len() / k {
                        let s = r * k;
                        let dot: f64 = (s..s + k).map(|i| gd[i] * y[i]).sum();
                        for i in s..s + k {
                            d[i] += y[i] * (gd[i] - dot) / t;
                        }
                    }
                });
            }
            LogSoftmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|d| {
                    for r in 0..y.len() / k {
                        let s = r * k;
                        let gsum: f64 = gd[s..s + k].iter().sum();
                        for i in s..s + k {
                            d[i] += gd[i] - y[i].exp() * gsum;
                        }
                    }
                });
            }
            LogSumExp(a) => {
                let x = self.val(*a).data();
                let y = node.value.data();
                let k = *self.shape(*a).last().unwrap_or(&1);
                acc(*a, &|d| {
                    for i in 0..x.len() {
                        d[i] += gd[i / k] * (x[i] - y[i / k]).exp();
                    }
                });
            }
            Pick(a, idx) => {
                let shape = self.shape(*a);
                let k = *shape.last().unwrap();
                let per = self.val(*a).len() / idx.len() / k;
                acc(*a, &|d| {
                    for (n, &j) in idx.iter().enumerate() {
                        for r in 0..per {
                            d[(n * per + r) * k + j] += gd[n * per + r];
                        }
                    }
                });
            }
            MinExcluding(a, _) => {
                let k = self.shape(*a)[1];
                let arg = &node.arg;
                acc(*a, &|d| {
                    for (n, &j) in arg.iter().enumerate() {
                        d[n * k + j] += gd[n];
                    }
                });
            }
            SqDist(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, c, k) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let (ad, bd) = (av.data(), bv.data());
                // dA_i = 2 (Σ_j G_ij) a_i - 2 (G B)_i
                acc(*a, &|d| {
                    gemm(n, k, c, gd, false, bd, false, d, true);
                    d.iter_mut().for_each(|x| *x *= -2.0);
                    for i in 0..n {
                        let rs: f64 = gd[i * k..(i + 1) * k].iter().sum();
                        for p in 0..c {
                            d[i * c + p] += 2.0 * rs * ad[i * c + p];
                        }
                    }
                });
                // dB_j = 2 (Σ_i G_ij) b_j - 2 (Gᵀ A)_j
                acc(*b, &|d| {
                    let mut gta = vec![0.0; k * c];
                    gemm(k, n, c, gd, true, ad, false, &mut gta, false);
                    for j in 0..k {
                        let cs: f64 = (0..n).map(|i| gd[i * k + j]).sum();
                        for p in 0..c {
                            d[j * c + p] += 2.0 * cs * bd[j * c + p] - 2.0 * gta[j * c + p];
                        }
                    }
                });
            }
            Center(a) => {
                let cg = double_center(g);
                acc(*a, &|d| d.iter_mut().zip(cg.data()).for_each(|(x, g)| *x += g));
            }
            GatherRows(a, idx) => {
                let c = self.val(*a).cols();
                acc(*a, &|d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for p in 0..c {
                            d[i * c + p] += gd[r * c + p];
                        }
                    }
                });
            }
            ConcatRows(vs) => {
                let mut off = 0;
                for v in vs {
                    let len = self.val(*v).len();
                    let part = &gd[off..off + len];
                    acc(*v, &|d| d.iter_mut().zip(part).for_each(|(x, g)| *x += g));
                    off += len;
                }
            }
            Conv2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(*x, *w, *b, *stride, *pad)?;
                let rows = geom.out_rows();
                let (pl, co) = (geom.patch_len(), geom.cout);
                acc(*b, &|d| {
                    for r in gd.chunks_exact(co) {
                        d.iter_mut().zip(r).for_each(|(x, g)| *x += g);
                    }
                });
                if self.nodes[w.0].requires_grad {
                    let cols = im2col(self.val(*x).data(), &geom);
                    acc(*w, &|d| gemm(pl, rows, co, &cols, true, gd, false, d, true));
                }
                let wv = self.val(*w).data();
                acc(*x, &|d| {
                    let mut dcols = vec![0.0; rows * pl];
                    gemm(rows, co, pl, gd, false, wv, true, &mut dcols, false);
                    col2im(&dcols, &geom, d);
                });
            }
        }
        Ok(())
    }
}
