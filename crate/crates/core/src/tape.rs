//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive applied to a [`Var`] appends one node to its [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse recording order, which is a
//! valid reverse topological order because parents are always recorded
//! before their children.
//!
//! Broadcasting in the binary elementwise ops is restricted to leading axes:
//! the smaller operand's shape must be a suffix of the larger one's, so a
//! `(p)` bias broadcasts over a `(T, p)` sequence but a `(T, 1)` column does
//! not.
//!
//! [`custom_gradient`] records an opaque node whose interior computation is
//! invisible to the tape. The DEQ layer uses it so that solver iterations
//! leave no footprint.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Backward rule of an opaque node: `(inputs, output, upstream) -> input grads`.
pub type CustomRule = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send>;

enum Op {
    Leaf,
    Constant,
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    ConcatLast { widths: Vec<usize> },
    ConcatRows,
    SliceLast { start: usize, end: usize },
    SliceRows { start: usize },
    Reshape,
    Transpose,
    Sum,
    Mean,
    Scale(f64),
    Standardize { inv_std: Vec<f64> },
    Custom(CustomRule),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::MatMulT => "matmul_t",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::ConcatLast { .. } => "concat_last",
            Op::ConcatRows => "concat_rows",
            Op::SliceLast { .. } => "slice_last",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale(_) => "scale",
            Op::Standardize { .. } => "standardize_rows",
            Op::Custom(_) => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    parents: Vec<usize>,
}

/// Single-threaded recording context. A tape may be moved to another thread
/// but never shared between threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, true, Op::Leaf, Vec::new())
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, false, Op::Constant, Vec::new())
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    fn push_raw(&self, value: Tensor, requires_grad: bool, op: Op, parents: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
            parents,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_raw(value, requires_grad, op, parents))
    }

    fn check<'t>(&'t self, v: Var<'t>) -> Result<usize> {
        if std::ptr::eq(v.tape, self) {
            Ok(v.idx)
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Concatenate along the last axis; all other axes must agree.
    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape();
            if first.is_empty() {
                return Err(Error::invalid("concat_last", "scalar input"));
            }
            let lead = &first[..first.len() - 1];
            let rows: usize = lead.iter().product();
            let mut widths = Vec::with_capacity(idx.len());
            for &i in &idx {
                let s = nodes[i].value.shape();
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(Error::shape("concat_last", first, s));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&i, &w) in idx.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::from_parts(shape, data), widths)
        };
        self.push(value, Op::ConcatLast { widths }, idx)
    }

    /// Concatenate along the first axis; trailing axes must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape();
            if first.is_empty() {
                return Err(Error::invalid("concat_rows", "scalar input"));
            }
            let tail = &first[1..];
            let mut heights = Vec::with_capacity(idx.len());
            let mut data = Vec::new();
            for &i in &idx {
                let s = nodes[i].value.shape();
                if s.len() != first.len() || &s[1..] != tail {
                    return Err(Error::shape("concat_rows", first, s));
                }
                heights.push(s[0]);
                data.extend_from_slice(nodes[i].value.data());
            }
            let mut shape = vec![heights.iter().sum()];
            shape.extend_from_slice(tail);
            Tensor::from_parts(shape, data)
        };
        self.push(value, Op::ConcatRows, idx)
    }

    /// Record an opaque node computed outside the tape.
    ///
    /// The node's value is `value`; its gradient contribution to each of
    /// `inputs` comes from `rule`. Nothing done to produce `value` is recorded.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, rule: CustomRule) -> Result<Var<'t>> {
        let idx: Vec<usize> = inputs.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        self.push(value, Op::Custom(rule), idx)
    }

    /// Reverse pass from a scalar loss. Gradients are stored on the tape and
    /// read back with [`Tape::grad`]. A second call without
    /// [`Tape::reset_grads`] is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let idx = self.check(loss)?;
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let seed = {
            let nodes = self.nodes.borrow();
            let shape = nodes[idx].value.shape();
            if nodes[idx].value.len() != 1 {
                return Err(Error::NotScalar(shape.to_vec()));
            }
            Tensor::ones(shape.to_vec())
        };
        let adj = self.adjoints(idx, &seed, None)?;
        *self.grads.borrow_mut() = Some(adj);
        Ok(())
    }

    /// Gradient of the last backward pass. `None` for non-differentiable
    /// nodes or before backward; zeros for differentiable nodes the loss
    /// does not depend on.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let idx = self.check(v).ok()?;
        let nodes = self.nodes.borrow();
        if !nodes[idx].requires_grad {
            return None;
        }
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        Some(
            grads
                .get(idx)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(nodes[idx].value.shape().to_vec())),
        )
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Vector–Jacobian product `seedᵀ · ∂output/∂wrt` for each of `wrt`.
    ///
    /// Leaves stored gradients untouched, so it may be called repeatedly on
    /// one recorded graph. Only nodes lying between `wrt` and `output` are
    /// visited.
    pub fn vjp_of<'t>(&'t self, output: Var<'t>, seed: &Tensor, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        let out = self.check(output)?;
        let wrt_idx: Vec<usize> = wrt.iter().map(|&w| self.check(w)).collect::<Result<_>>()?;
        let mask = {
            let nodes = self.nodes.borrow();
            let mut mask = vec![false; out + 1];
            for &w in &wrt_idx {
                if w <= out {
                    mask[w] = true;
                }
            }
            for i in 0..=out {
                if !mask[i] && nodes[i].parents.iter().any(|&p| mask[p]) {
                    mask[i] = true;
                }
            }
            mask
        };
        {
            let nodes = self.nodes.borrow();
            if nodes[out].value.shape() != seed.shape() {
                return Err(Error::shape("vjp", nodes[out].value.shape(), seed.shape()));
            }
        }
        let adj = self.adjoints(out, seed, Some(&mask))?;
        let nodes = self.nodes.borrow();
        Ok(wrt_idx
            .iter()
            .map(|&w| {
                adj.get(w)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(nodes[w].value.shape().to_vec()))
            })
            .collect())
    }

    fn adjoints(&self, out: usize, seed: &Tensor, mask: Option<&[bool]>) -> Result<Vec<Option<Tensor>>> {
        let nodes = self.nodes.borrow();
        let wanted = |i: usize| nodes[i].requires_grad && mask.is_none_or(|m| m[i]);
        let mut adj: Vec<Option<Tensor>> = (0..=out).map(|_| None).collect();
        if !wanted(out) {
            return Ok(adj);
        }
        adj[out] = Some(seed.clone());
        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if node.parents.is_empty() {
                adj[i] = Some(g);
                continue;
            }
            let need: Vec<bool> = node.parents.iter().map(|&p| wanted(p)).collect();
            if need.iter().any(|&n| n) {
                let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let contribs = backward_rule(node, &parents, &g, &need)?;
                for ((&p, c), &n) in node.parents.iter().zip(contribs).zip(&need) {
                    if !n {
                        continue;
                    }
                    let Some(c) = c else { continue };
                    match &mut adj[p] {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(adj)
    }
}

/// Resolve leading-axis broadcasting between two shapes. Returns the output
/// shape.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn binary_values(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect()
    };
    Tensor::from_parts(shape, data)
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: Vec<f64>, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if g.len() == n {
        return Tensor::from_parts(shape.to_vec(), g);
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn leading_rows(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = if last == 0 { 0 } else { shape.iter().product::<usize>() / last };
    (rows, last)
}

fn backward_rule(node: &Node, parents: &[&Tensor], g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let gd = g.data();
    let out = &node.value;
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(
            parents[0].shape().to_vec(),
            (0..gd.len()).map(f).collect(),
        ))]
    };
    Ok(match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul => {
            let (a, b) = (parents[0], parents[1]);
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            vec![
                need[0].then(|| Tensor::from_parts(a.shape().to_vec(), kernels::mm_nt(gd, b.data(), m, n, k))),
                need[1].then(|| Tensor::from_parts(b.shape().to_vec(), kernels::mm_tn(a.data(), gd, m, k, n))),
            ]
        }
        Op::MatMulT => {
            let (a, b) = (parents[0], parents[1]);
            let (n, k) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            vec![
                need[0].then(|| Tensor::from_parts(a.shape().to_vec(), kernels::mm(gd, b.data(), m, n, k))),
                need[1].then(|| Tensor::from_parts(b.shape().to_vec(), kernels::mm_tn(gd, a.data(), m, n, k))),
            ]
        }
        Op::Add => vec![
            need[0].then(|| reduce_to(gd.to_vec(), parents[0].shape())),
            need[1].then(|| reduce_to(gd.to_vec(), parents[1].shape())),
        ],
        Op::Sub => vec![
            need[0].then(|| reduce_to(gd.to_vec(), parents[0].shape())),
            need[1].then(|| reduce_to(gd.iter().map(|v| -v).collect(), parents[1].shape())),
        ],
        Op::Mul => {
            let (a, b) = (parents[0].data(), parents[1].data());
            vec![
                need[0].then(|| {
                    reduce_to(
                        gd.iter().enumerate().map(|(i, v)| v * b[i % b.len()]).collect(),
                        parents[0].shape(),
                    )
                }),
                need[1].then(|| {
                    reduce_to(
                        gd.iter().enumerate().map(|(i, v)| v * a[i % a.len()]).collect(),
                        parents[1].shape(),
                    )
                }),
            ]
        }
        Op::Tanh => {
            let y = out.data();
            unary(&|i| gd[i] * (1.0 - y[i] * y[i]))
        }
        Op::Sigmoid => {
            let y = out.data();
            unary(&|i| gd[i] * y[i] * (1.0 - y[i]))
        }
        Op::Relu => {
            let x = parents[0].data();
            unary(&|i| if x[i] > 0.0 { gd[i] } else { 0.0 })
        }
        Op::ConcatLast { widths } => {
            let total: usize = widths.iter().sum();
            let rows = gd.len() / total.max(1);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (j, &w) in widths.iter().enumerate() {
                if need[j] {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(Tensor::from_parts(parents[j].shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }
        Op::ConcatRows => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parents.len());
            for (j, p) in parents.iter().enumerate() {
                let n = p.len();
                grads.push(need[j].then(|| Tensor::from_parts(p.shape().to_vec(), gd[offset..offset + n].to_vec())));
                offset += n;
            }
            grads
        }
        Op::SliceLast { start, end } => {
            let (rows, last) = leading_rows(parents[0].shape());
            let w = end - start;
            let mut d = vec![0.0; rows * last];
            for r in 0..rows {
                d[r * last + start..r * last + end].copy_from_slice(&gd[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::from_parts(parents[0].shape().to_vec(), d))]
        }
        Op::SliceRows { start } => {
            let p = parents[0];
            let row = p.len() / p.shape()[0].max(1);
            let mut d = vec![0.0; p.len()];
            d[start * row..start * row + gd.len()].copy_from_slice(gd);
            vec![Some(Tensor::from_parts(p.shape().to_vec(), d))]
        }
        Op::Reshape => vec![Some(Tensor::from_parts(parents[0].shape().to_vec(), gd.to_vec()))],
        Op::Transpose => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![Some(Tensor::from_parts(parents[0].shape().to_vec(), kernels::transpose(gd, r, c)))]
        }
        Op::Sum => vec![Some(Tensor::full(parents[0].shape().to_vec(), gd[0]))],
        Op::Mean => {
            let n = parents[0].len().max(1) as f64;
            vec![Some(Tensor::full(parents[0].shape().to_vec(), gd[0] / n))]
        }
        Op::Scale(s) => unary(&|i| gd[i] * s),
        Op::Standardize { inv_std } => {
            let (rows, n) = leading_rows(out.shape());
            let y = out.data();
            let mut d = vec![0.0; rows * n];
            for r in 0..rows {
                let gr = &gd[r * n..(r + 1) * n];
                let yr = &y[r * n..(r + 1) * n];
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    d[r * n + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            vec![Some(Tensor::from_parts(parents[0].shape().to_vec(), d))]
        }
        Op::Custom(rule) => {
            let grads = rule(parents, out, g)?;
            if grads.len() != parents.len() {
                return Err(Error::CustomArity {
                    expected: parents.len(),
                    got: grads.len(),
                });
            }
            for (gr, p) in grads.iter().zip(parents) {
                if gr.shape() != p.shape() {
                    return Err(Error::shape("custom backward", p.shape(), gr.shape()));
                }
            }
            grads.into_iter().map(Some).collect()
        }
    })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Position of this node on its tape.
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(f);
        self.tape.push(value, op, vec![self.idx])
    }

    fn binary(self, rhs: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let r = self.tape.check(rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[r].value);
            let shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
            binary_values(a, b, shape, f)
        };
        self.tape.push(value, op, vec![self.idx, r])
    }

    fn matmul_impl(self, rhs: Var<'t>, transposed: bool) -> Result<Var<'t>> {
        let r = self.tape.check(rhs)?;
        let op = if transposed { Op::MatMulT } else { Op::MatMul };
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[r].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() != 2 {
                return Err(Error::shape(op.name(), sa, sb));
            }
            let k = sa[sa.len() - 1];
            let (bk, n) = if transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if k != bk {
                return Err(Error::shape(op.name(), sa, sb));
            }
            let m = a.len() / k.max(1);
            let data = if transposed {
                kernels::mm_nt(a.data(), b.data(), m, k, n)
            } else {
                kernels::mm(a.data(), b.data(), m, k, n)
            };
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            Tensor::from_parts(shape, data)
        };
        self.tape.push(value, op, vec![self.idx, r])
    }

    /// `self · rhs`, with `self` of shape `(…, m, k)` and `rhs` of shape `(k, n)`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ`, with `rhs` stored `(n, k)` as in a `(out × in)` weight.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(s), move |v| v * s)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            let shape = v.shape();
            let Some(&last) = shape.last() else {
                return Err(Error::invalid("slice_last", "scalar input"));
            };
            if start > end || end > last {
                return Err(Error::invalid("slice_last", format!("range {start}..{end} out of bounds for {shape:?}")));
            }
            let (rows, _) = leading_rows(shape);
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&v.data()[r * last + start..r * last + end]);
            }
            let mut s = shape.to_vec();
            *s.last_mut().unwrap() = w;
            Tensor::from_parts(s, data)
        };
        self.tape.push(value, Op::SliceLast { start, end }, vec![self.idx])
    }

    /// Entries `start..end` of the first axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            let shape = v.shape();
            let Some(&first) = shape.first() else {
                return Err(Error::invalid("slice_rows", "scalar input"));
            };
            if start > end || end > first {
                return Err(Error::invalid("slice_rows", format!("range {start}..{end} out of bounds for {shape:?}")));
            }
            let row = v.len() / first.max(1);
            let mut s = shape.to_vec();
            s[0] = end - start;
            Tensor::from_parts(s, v.data()[start * row..end * row].to_vec())
        };
        self.tape.push(value, Op::SliceRows { start }, vec![self.idx])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.reshape(shape)?;
        self.tape.push(value, Op::Reshape, vec![self.idx])
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.transpose()?;
        self.tape.push(value, Op::Transpose, vec![self.idx])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.nodes.borrow()[self.idx].value.sum();
        self.tape.push(Tensor::scalar(s), Op::Sum, vec![self.idx])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(self) -> Result<Var<'t>> {
        let s = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            if v.is_empty() {
                return Err(Error::invalid("mean", "empty tensor"));
            }
            v.sum() / v.len() as f64
        };
        self.tape.push(Tensor::scalar(s), Op::Mean, vec![self.idx])
    }

    /// Zero-mean, unit-variance normalization of every last-axis row:
    /// `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn standardize_rows(self, eps: f64) -> Result<Var<'t>> {
        let (value, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.idx].value;
            if v.ndim() == 0 {
                return Err(Error::invalid("standardize_rows", "scalar input"));
            }
            let (rows, n) = leading_rows(v.shape());
            let mut data = Vec::with_capacity(v.len());
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &v.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                data.extend(row.iter().map(|x| (x - mean) * is));
            }
            (Tensor::from_parts(v.shape().to_vec(), data), inv_std)
        };
        self.tape.push(value, Op::Standardize { inv_std }, vec![self.idx])
    }
}

/// `vᵀ · J_f(at)`, shaped like `at`. Runs on a private tape.
pub fn vjp<F>(f: F, at: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: for<'t> FnOnce(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.leaf(at.clone());
    let y = f(x)?;
    let mut grads = tape.vjp_of(y, v, &[x])?;
    Ok(grads.pop().expect("one input"))
}

/// Wrap a forward computation as one opaque tape node.
///
/// `forward` sees input values only and cannot record anything. On the
/// reverse pass `backward_rule(inputs, output, upstream)` must return one
/// gradient per input, each shaped like that input.
pub fn custom_gradient<'t, F, B>(inputs: &[Var<'t>], forward: F, backward_rule: B) -> Result<Var<'t>>
where
    F: FnOnce(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send + 'static,
{
    let tape = inputs
        .first()
        .ok_or_else(|| Error::invalid("custom_gradient", "at least one input is required"))?
        .tape;
    let values: Vec<Tensor> = inputs.iter().map(|v| v.value()).collect();
    let out = forward(&values)?;
    tape.custom(inputs, out, Box::new(backward_rule))
}
