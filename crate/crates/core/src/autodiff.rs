//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation is evaluated eagerly when it is recorded; the tape only
//! remembers enough (op kind, inputs, output) to run the chain rule
//! backwards. Node ids are handed out in recording order, so the inputs of a
//! node always precede it and a single reverse sweep visits every node once.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    MatMul,
    /// Elementwise, with broadcasting of 1×1, 1×n and m×1 operands.
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    SoftmaxRow,
    LogSoftmaxRow,
    /// Reduces each row to one value; output is `rows × 1`.
    LogSumExpRow,
    Concat {
        axis: usize,
    },
    /// Half-open range `start..end` along `axis`.
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Gathers rows of the table input.
    EmbeddingLookup {
        ids: Vec<usize>,
    },
    ScalarMul(f64),
    Transpose,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise-mul",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::SoftmaxRow => "softmax-row",
            Op::LogSoftmaxRow => "log-softmax-row",
            Op::LogSumExpRow => "logsumexp-row",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::EmbeddingLookup { .. } => "embedding-lookup",
            Op::ScalarMul(_) => "scalar-mul",
            Op::Transpose => "transpose",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

/// Append-only record of a computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Index mapping for a broadcast operand of an `r × c` output.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
}

impl Bcast {
    #[inline]
    fn at(self, i: usize, j: usize) -> usize {
        let ii = if self.rows == 1 { 0 } else { i };
        let jj = if self.cols == 1 { 0 } else { j };
        ii * self.cols + jj
    }
}

fn broadcast_dims(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let fit = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (fit(a.0, b.0), fit(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Places a tensor on the tape as an input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs`, evaluating it immediately.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::dim(
                    op.name(),
                    format!("expects {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::dim(op.name(), "needs at least one input"));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown node id {}", bad.0)));
        }
        let value = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor<T>> {
        let v = |k: usize| &self.nodes[inputs[k].0].value;
        match op {
            Op::Leaf => unreachable!("leaves are created with Tape::leaf"),
            Op::MatMul => {
                let (a, b) = (v(0), v(1));
                let ((m, k), (k2, n)) = (a.dims2(), b.dims2());
                if k != k2 {
                    return Err(Error::dim(
                        "matmul",
                        format!("{:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut out = vec![T::zero(); m * n];
                kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
                Tensor::new(vec![m, n], out)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (v(0), v(1));
                let (ad, bd) = (a.dims2(), b.dims2());
                let (r, c) = broadcast_dims(op.name(), ad, bd)?;
                let (ba, bb) = (
                    Bcast { rows: ad.0, cols: ad.1 },
                    Bcast { rows: bd.0, cols: bd.1 },
                );
                let f: fn(T, T) -> T = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let (ax, bx) = (a.data(), b.data());
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        out.push(f(ax[ba.at(i, j)], bx[bb.at(i, j)]));
                    }
                }
                let shape = if ad == (r, c) {
                    a.shape().to_vec()
                } else if bd == (r, c) {
                    b.shape().to_vec()
                } else {
                    vec![r, c]
                };
                Tensor::new(shape, out)
            }
            Op::Tanh => Ok(v(0).map(|x| x.tanh())),
            Op::Sigmoid => Ok(v(0).map(sigmoid)),
            Op::Exp => Ok(v(0).map(|x| x.exp())),
            Op::ScalarMul(c) => {
                let c = T::from_f64(*c);
                Ok(v(0).map(|x| c * x))
            }
            Op::SoftmaxRow | Op::LogSoftmaxRow => {
                let a = v(0);
                let (r, c) = a.dims2();
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    let src = a.row_slice(i);
                    let dst = &mut out[i * c..(i + 1) * c];
                    if *op == Op::SoftmaxRow {
                        kernels::softmax_into(src, dst);
                    } else {
                        kernels::log_softmax_into(src, dst);
                    }
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            Op::LogSumExpRow => {
                let a = v(0);
                let r = a.rows();
                let out = (0..r).map(|i| kernels::logsumexp(a.row_slice(i))).collect();
                Tensor::new(vec![r, 1], out)
            }
            Op::Transpose => Ok(v(0).transpose()),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = (0..inputs.len()).map(v).collect();
                concat(parts.as_slice(), *axis)
            }
            Op::Slice { axis, start, end } => slice(v(0), *axis, *start, *end),
            Op::EmbeddingLookup { ids } => {
                let table = v(0);
                let (vocab, dim) = table.dims2();
                if ids.is_empty() {
                    return Err(Error::dim("embedding-lookup", "empty id list"));
                }
                let mut out = Vec::with_capacity(ids.len() * dim);
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::OutOfRange { id, size: vocab });
                    }
                    out.extend_from_slice(table.row_slice(id));
                }
                Tensor::new(vec![ids.len(), dim], out)
            }
        }
    }

    // Convenience recorders.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, &[a])
    }
    pub fn softmax_row(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxRow, &[a])
    }
    pub fn log_softmax_row(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSoftmaxRow, &[a])
    }
    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSumExpRow, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::ScalarMul(c), &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.record(Op::Slice { axis, start, end }, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.record(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }

    /// Element `(0, col)` of a row vector as a `1×1` node.
    pub fn pick(&mut self, row: NodeId, col: usize) -> Result<NodeId> {
        self.slice(row, 1, col, col + 1)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2();
        let mut x = a;
        if r > 1 {
            let ones = self.leaf(Tensor::full(&[1, r], T::one()));
            x = self.matmul(ones, x)?;
        }
        if c > 1 {
            let ones = self.leaf(Tensor::full(&[c, 1], T::one()));
            x = self.matmul(x, ones)?;
        }
        if x == a {
            // keep the result a distinct node so callers can treat it uniformly
            x = self.scale(a, 1.0)?;
        }
        Ok(x)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown loss node {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let lv = &self.nodes[loss.0].value;
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if node.op != Op::Leaf {
                self.propagate(node, &g, &mut grads);
            }
            grads[k] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let y = &node.value;
        let mut acc = |id: NodeId, delta: Tensor<T>| match &mut grads[id.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let ((m, k), (_, n)) = (a.dims2(), b.dims2());
                let mut ga = vec![T::zero(); m * k];
                kernels::matmul_nt(g.data(), b.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                kernels::matmul_tn(a.data(), g.data(), &mut gb, m, k, n);
                acc(node.inputs[0], Tensor::new(a.shape().to_vec(), ga).unwrap());
                acc(node.inputs[1], Tensor::new(b.shape().to_vec(), gb).unwrap());
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let (ad, bd) = (a.dims2(), b.dims2());
                let (r, c) = g.dims2();
                let (ba, bb) = (
                    Bcast { rows: ad.0, cols: ad.1 },
                    Bcast { rows: bd.0, cols: bd.1 },
                );
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); b.len()];
                let gd = g.data();
                for i in 0..r {
                    for j in 0..c {
                        let gij = gd[i * c + j];
                        let (ia, ib) = (ba.at(i, j), bb.at(i, j));
                        match node.op {
                            Op::Add => {
                                ga[ia] = ga[ia] + gij;
                                gb[ib] = gb[ib] + gij;
                            }
                            Op::Sub => {
                                ga[ia] = ga[ia] + gij;
                                gb[ib] = gb[ib] - gij;
                            }
                            _ => {
                                ga[ia] = ga[ia] + gij * b.data()[ib];
                                gb[ib] = gb[ib] + gij * a.data()[ia];
                            }
                        }
                    }
                }
                acc(node.inputs[0], Tensor::new(a.shape().to_vec(), ga).unwrap());
                acc(node.inputs[1], Tensor::new(b.shape().to_vec(), gb).unwrap());
            }
            Op::Tanh => {
                let d = zip_map(g, y, |g, y| g * (T::one() - y * y));
                acc(node.inputs[0], d);
            }
            Op::Sigmoid => {
                let d = zip_map(g, y, |g, y| g * y * (T::one() - y));
                acc(node.inputs[0], d);
            }
            Op::Exp => acc(node.inputs[0], zip_map(g, y, |g, y| g * y)),
            Op::ScalarMul(c) => {
                let c = T::from_f64(*c);
                acc(node.inputs[0], g.map(|g| c * g));
            }
            Op::SoftmaxRow => {
                let (r, c) = y.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(node.inputs[0], Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmaxRow => {
                let (r, c) = y.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        d[i * c + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(node.inputs[0], Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSumExpRow => {
                let x = input(0);
                let (r, c) = x.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let (gi, yi) = (g.data()[i], y.data()[i]);
                    for (j, &xv) in x.row_slice(i).iter().enumerate() {
                        d[i * c + j] = gi * (xv - yi).exp();
                    }
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Transpose => {
                let x = input(0);
                acc(node.inputs[0], g.transpose().reshaped(x.shape().to_vec()).unwrap());
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                for (k, &id) in node.inputs.iter().enumerate() {
                    let x = input(k);
                    let extent = if *axis == 0 { x.rows() } else { x.cols() };
                    let part = slice(g, *axis, offset, offset + extent)
                        .unwrap()
                        .reshaped(x.shape().to_vec())
                        .unwrap();
                    acc(id, part);
                    offset += extent;
                }
            }
            Op::Slice { axis, start, end } => {
                let x = input(0);
                let (r, c) = x.dims2();
                let mut d = vec![T::zero(); r * c];
                let gc = g.cols();
                for i in 0..g.rows() {
                    for j in 0..gc {
                        let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                        d[si * c + sj] = g.data()[i * gc + j];
                    }
                }
                debug_assert!(end > start);
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::EmbeddingLookup { ids } => {
                // scatter-add into the touched rows only
                let table = input(0);
                let dim = table.cols();
                let mut d = vec![T::zero(); table.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(r);
                    let dst = &mut d[id * dim..(id + 1) * dim];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
                acc(node.inputs[0], Tensor::new(table.shape().to_vec(), d).unwrap());
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).unwrap()
}

fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    match axis {
        0 => {
            let c = parts[0].cols();
            if let Some(p) = parts.iter().find(|p| p.cols() != c) {
                return Err(Error::dim(
                    "concat",
                    format!("axis 0 needs equal columns: {:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
            let rows: usize = parts.iter().map(|p| p.rows()).sum();
            let mut out = Vec::with_capacity(rows * c);
            for p in parts {
                out.extend_from_slice(p.data());
            }
            Tensor::new(vec![rows, c], out)
        }
        1 => {
            let r = parts[0].rows();
            if let Some(p) = parts.iter().find(|p| p.rows() != r) {
                return Err(Error::dim(
                    "concat",
                    format!("axis 1 needs equal rows: {:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut out = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in parts {
                    out.extend_from_slice(p.row_slice(i));
                }
            }
            Tensor::new(vec![r, cols], out)
        }
        _ => Err(Error::dim("concat", format!("axis {axis} not supported"))),
    }
}

fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2();
    let extent = match axis {
        0 => r,
        1 => c,
        _ => return Err(Error::dim("slice", format!("axis {axis} not supported"))),
    };
    if start >= end || end > extent {
        return Err(Error::dim(
            "slice",
            format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
        ));
    }
    if axis == 0 {
        Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())
    } else {
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        Tensor::new(vec![r, end - start], out)
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zero-filled with `shape` when the node is unused.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares backward gradients of `f` against central differences
/// `(f(p+ε) − f(p−ε)) / 2ε`, entry by entry.
///
/// `f` receives a fresh tape and the leaf ids of `params` and must return a
/// scalar node. Relative error is `|a−b| / max(1e−8, |a|+|b|)`; a non-finite
/// difference counts as an infinite error.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], p.shape());
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let plus = eval(&work);
            work[pi].data_mut()[e] = orig - epsilon;
            let minus = eval(&work);
            work[pi].data_mut()[e] = orig;
            let a = analytic.data()[e];
            let err = match (plus, minus) {
                (Ok(fp), Ok(fm)) => {
                    let n = (fp - fm) / (2.0 * epsilon);
                    if n.is_finite() {
                        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
                        (rel, n)
                    } else {
                        (f64::INFINITY, n)
                    }
                }
                (Err(Error::Numeric { .. }), _) | (_, Err(Error::Numeric { .. })) => {
                    (f64::INFINITY, f64::NAN)
                }
                (Err(err), _) | (_, Err(err)) => return Err(err),
            };
            report.entries += 1;
            if err.0 > report.max_rel_error || err.0.is_nan() {
                report.max_rel_error = if err.0.is_nan() { f64::INFINITY } else { err.0 };
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = err.1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_row_uniform_and_normalized() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax_row(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(random(&mut rng, &[4, 7]).map(|v| v * 30.0));
        let s = tape.softmax_row(x).unwrap();
        for i in 0..4 {
            let total: f64 = tape.value(s).row_slice(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_normalized_in_f32() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::row(vec![3.0, -1.0, 0.5, 8.0, 2.0]));
        let s = tape.softmax_row(x).unwrap();
        let total: f32 = tape.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logsumexp_row_large_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1000.0, 1000.0]));
        let l = tape.logsumexp_row(a).unwrap();
        // shift-by-max oracle: 1000 + ln(e^0 + e^0)
        assert!((tape.value(l).item() - 1000.693_147_180_559_9).abs() < 1e-9);
        let b = tape.leaf(t(&[2, 2], &[1e4, -1e4, -1e4, -1e4]));
        let l = tape.logsumexp_row(b).unwrap();
        assert!(tape.value(l).is_finite());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
        assert_eq!(g.get(y).unwrap().item(), 1.0);
    }

    #[test]
    fn nll_of_softmax_gradient_closed_form() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let c = 2;
        let mut tape = Tape::new();
        let zid = tape.leaf(t(&[1, 4], &z));
        let lp = tape.log_softmax_row(zid).unwrap();
        let pick = tape.pick(lp, c).unwrap();
        let nll = tape.scale(pick, -1.0).unwrap();
        let g = tape.backward(nll).unwrap();
        let p = kernels::softmax(&z);
        for (j, &gj) in g.get(zid).unwrap().data().iter().enumerate() {
            let expected = p[j] - if j == c { 1.0 } else { 0.0 };
            assert!((gj - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = tape.leaf(t(&[3, 2], &[0.0; 6]));
        let err = tape.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 1], &[1000.0]));
        assert!(matches!(tape.exp(a), Err(Error::Numeric { op: "exp" })));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.tanh(a).unwrap();
        let c = tape.mul(a, b).unwrap();
        for id in [b, c] {
            assert!(tape.inputs(id).iter().all(|i| i.index() < id.index()));
        }
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(
            |tape, p| tape.mul(p[0], p[0]),
            &[t(&[1, 1], &[3.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn grad_check_sum_tanh_wx() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, &[4, 3]);
        let x = random(&mut rng, &[3, 2]);
        let r = grad_check(
            |tape, p| {
                let y = tape.matmul(p[0], p[1])?;
                let y = tape.tanh(y)?;
                tape.sum(y)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_two_layer_tanh_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[1, 5]);
        let w1 = random(&mut rng, &[5, 6]);
        let b1 = random(&mut rng, &[1, 6]);
        let w2 = random(&mut rng, &[6, 4]);
        let r = grad_check(
            |tape, p| {
                let h = tape.matmul(p[0], p[1])?;
                let h = tape.add(h, p[2])?;
                let h = tape.tanh(h)?;
                let o = tape.matmul(h, p[3])?;
                let o = tape.tanh(o)?;
                let lp = tape.log_softmax_row(o)?;
                let v = tape.pick(lp, 1)?;
                tape.scale(v, -1.0)
            },
            &[x, w1, b1, w2],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_every_op_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[1, 4]);
        let col = random(&mut rng, &[3, 1]);
        let table = random(&mut rng, &[5, 4]);
        let r = grad_check(
            |tape, p| {
                let x = tape.add(p[0], p[1])?; // row broadcast
                let x = tape.mul(x, p[2])?; // column broadcast
                let x = tape.sub(x, p[1])?;
                let s = tape.sigmoid(x)?;
                let e = tape.embedding(p[3], &[4, 0, 4])?;
                let x = tape.concat(&[s, e], 1)?; // 3x8
                let x = tape.slice(x, 1, 2, 7)?; // 3x5
                let x = tape.transpose(x)?; // 5x3
                let sm = tape.softmax_row(x)?;
                let ls = tape.logsumexp_row(x)?; // 5x1
                let ls = tape.exp(ls)?;
                let ls = tape.scale(ls, 0.1)?;
                let m = tape.matmul(sm, p[2])?; // 5x1
                let y = tape.concat(&[m, ls], 0)?; // 10x1
                let y = tape.tanh(y)?;
                let y = tape.transpose(y)?;
                let y = tape.log_softmax_row(y)?;
                tape.pick(y, 3)
            },
            &[a, b, col, table],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn embedding_gradient_touches_only_used_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[4, 2], &[0.0; 8]));
        let rows = tape.embedding(table, &[1, 1, 3]).unwrap();
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(
            g.get(table).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn matmul_adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 4]);
        let gout = random(&mut rng, &[2, 4]);
        let mut tape = Tape::new();
        let (ai, bi, gi) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(gout.clone()));
        let c = tape.matmul(ai, bi).unwrap();
        let w = tape.mul(c, gi).unwrap();
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        let mut ga = vec![0.0; 6];
        kernels::matmul(gout.data(), b.transpose().data(), &mut ga, 2, 4, 3);
        let mut gb = vec![0.0; 12];
        kernels::matmul(a.transpose().data(), gout.data(), &mut gb, 3, 2, 4);
        for (x, y) in g.get(ai).unwrap().data().iter().zip(&ga) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in g.get(bi).unwrap().data().iter().zip(&gb) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::<f32>::new();
            let w = tape.leaf(random(&mut rng, &[4, 4]).cast());
            let x = tape.leaf(random(&mut rng, &[1, 4]).cast());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let h = tape.log_softmax_row(h).unwrap();
            let l = tape.pick(h, 2).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(h).clone(), g.get(w).unwrap().clone())
        };
        assert_eq!(build(), build());
    }
}
