//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] computes its value eagerly and appends a node
//! to the owning [`Tape`]. Node ids are assigned in creation order, so the
//! node list is always a valid topological order. [`Tape::backward`] walks it
//! once in reverse; the tape is consumed afterwards.
//!
//! ```
//! use actrec::autodiff::Tape;
//! use actrec::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).data(), &[2.0, -4.0]);
//! ```

mod gradcheck;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Elementwise, Padding, Tensor};

pub use gradcheck::{compare_gradients, grad_check, GradEntry, GradReport};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Unary(Elementwise),
    MatMul,
    Transpose,
    Conv(ConvGeom),
    Softmax,
    SpatialAvgPool,
    AvgPool2 { c: usize, h: usize, w: usize },
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Sum,
    MeanRows,
    CrossEntropy { probs: Vec<f64>, label: usize },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape belongs to a single thread of execution; independent samples use
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A tensor value bound to a node of a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Tensor,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

/// Gradients of a scalar loss with respect to the tape's differentiable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        self.by_node
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.by_node.get(&id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// A leaf; gradients are reported for it when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value: value.clone(),
            requires_grad,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, op: Op, parents: &[&Var<'_>], value: Tensor) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.id).collect(),
            value: value.clone(),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id,
            value,
        })
    }

    /// Propagates d(loss)/d(node) back to every differentiable leaf.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Invalid("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        if loss.value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_node.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (k, pg) in local_grads(&nodes, node, &g).into_iter().enumerate() {
                let pid = node.parents[k];
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

/// Vector-Jacobian products for each parent of `node`, given the node's
/// output gradient `g`. `None` marks a parent that needs no gradient.
fn local_grads(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let parent = |k: usize| &nodes[node.parents[k]];
    let wants = |k: usize| parent(k).requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add | Op::Sub => {
            let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
            let ga = wants(0).then(|| kernels::reduce_to(g, out_shape, parent(0).value.shape()));
            let gb = wants(1).then(|| {
                let mut r = kernels::reduce_to(g, out_shape, parent(1).value.shape());
                if sign < 0.0 {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                r
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (&parent(0).value, &parent(1).value);
            let scaled = |other: &Tensor, target: &Tensor| {
                if other.shape() == out_shape {
                    let prod: Vec<f64> = g.iter().zip(other.data()).map(|(x, y)| x * y).collect();
                    kernels::reduce_to(&prod, out_shape, target.shape())
                } else {
                    let offs = kernels::broadcast_offsets(out_shape, other.shape());
                    let od = other.data();
                    let prod: Vec<f64> = g.iter().zip(offs).map(|(x, o)| x * od[o]).collect();
                    kernels::reduce_to(&prod, out_shape, target.shape())
                }
            };
            vec![wants(0).then(|| scaled(b, a)), wants(1).then(|| scaled(a, b))]
        }
        Op::Unary(kind) => {
            let x = parent(0).value.data();
            let y = node.value.data();
            let d: Vec<f64> = match kind {
                Elementwise::Scale(c) => g.iter().map(|v| v * c).collect(),
                Elementwise::Affine { scale, .. } => g.iter().map(|v| v * scale).collect(),
                Elementwise::Sigmoid => g.iter().zip(y).map(|(v, s)| v * s * (1.0 - s)).collect(),
                Elementwise::Tanh => g.iter().zip(y).map(|(v, t)| v * (1.0 - t * t)).collect(),
                Elementwise::Exp => g.iter().zip(y).map(|(v, e)| v * e).collect(),
                Elementwise::Log => g.iter().zip(x).map(|(v, xv)| v / xv).collect(),
                Elementwise::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(v, xv)| if *xv > 0.0 { *v } else { 0.0 })
                    .collect(),
                Elementwise::Add | Elementwise::Subtract | Elementwise::Hadamard => {
                    unreachable!("binary kinds are recorded as Add/Sub/Mul")
                }
            };
            vec![Some(d)]
        }
        Op::MatMul => {
            let (a, b) = (&parent(0).value, &parent(1).value);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            vec![
                wants(0).then(|| kernels::matmul_nt(g, b.data(), m, n, k)),
                wants(1).then(|| kernels::matmul_tn(a.data(), g, m, k, n)),
            ]
        }
        Op::Transpose => {
            let (r, c) = (out_shape[0], out_shape[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            vec![Some(d)]
        }
        Op::Conv(geom) => {
            let (x, k) = (&parent(0).value, &parent(1).value);
            vec![
                wants(0).then(|| geom.backward_input(k.data(), g)),
                wants(1).then(|| geom.backward_kernel(x.data(), g)),
            ]
        }
        Op::Softmax => {
            let y = node.value.data();
            let mut dot = 0.0;
            for (gv, yv) in g.iter().zip(y) {
                dot += gv * yv;
            }
            vec![Some(g.iter().zip(y).map(|(gv, yv)| yv * (gv - dot)).collect())]
        }
        Op::SpatialAvgPool => {
            let s = parent(0).value.shape();
            let plane = s[1] * s[2];
            let inv = 1.0 / plane as f64;
            vec![Some(g.iter().flat_map(|v| std::iter::repeat_n(v * inv, plane)).collect())]
        }
        Op::AvgPool2 { c, h, w } => vec![Some(kernels::avg_pool2_backward(g, *c, *h, *w))],
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat { axis } => {
            let (outer, inner_out) = axis_split(out_shape, *axis);
            let mut offset = 0;
            node.parents
                .iter()
                .map(|&pid| {
                    let p = &nodes[pid];
                    let (_, inner_p) = axis_split(p.value.shape(), *axis);
                    let res = p.requires_grad.then(|| {
                        let mut d = Vec::with_capacity(p.value.len());
                        for o in 0..outer {
                            let base = o * inner_out + offset;
                            d.extend_from_slice(&g[base..base + inner_p]);
                        }
                        d
                    });
                    offset += inner_p;
                    res
                })
                .collect()
        }
        Op::Narrow { axis, start } => {
            let ps = parent(0).value.shape();
            let (outer, inner_p) = axis_split(ps, *axis);
            let (_, inner_o) = axis_split(out_shape, *axis);
            let stride: usize = ps[axis + 1..].iter().product();
            let mut d = vec![0.0; parent(0).value.len()];
            for o in 0..outer {
                let src = o * inner_p + start * stride;
                d[src..src + inner_o].copy_from_slice(&g[o * inner_o..(o + 1) * inner_o]);
            }
            vec![Some(d)]
        }
        Op::Sum => vec![Some(vec![g[0]; parent(0).value.len()])],
        Op::MeanRows => {
            let rows = parent(0).value.shape()[0];
            let inv = 1.0 / rows as f64;
            let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
            vec![Some(row.repeat(rows))]
        }
        Op::CrossEntropy { probs, label } => {
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            d[*label] -= g[0];
            vec![Some(d)]
        }
    }
}

/// `(product of extents before axis, product of extents from axis on)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis..].iter().product())
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{op}: operands recorded on different tapes")))
        }
    }

    fn binary(&self, other: &Var<'t>, kind: Elementwise, op: Op) -> Result<Var<'t>> {
        self.same_tape(other, kind.name())?;
        let v = Tensor::elementwise(kind, &self.value, Some(&other.value))?;
        self.tape.push(op, &[self, other], v)
    }

    fn unary(&self, kind: Elementwise) -> Result<Var<'t>> {
        let v = Tensor::elementwise(kind, &self.value, None)?;
        self.tape.push(Op::Unary(kind), &[self], v)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Elementwise::Add, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Elementwise::Subtract, Op::Sub)
    }

    /// Hadamard product with singleton-axis broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Elementwise::Hadamard, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Elementwise::Scale(c))
    }

    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>> {
        self.unary(Elementwise::Affine { scale, shift })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Elementwise::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Elementwise::Tanh)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Elementwise::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Elementwise::Log)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Elementwise::Relu)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let v = self.value.matmul(&other.value)?;
        self.tape.push(Op::MatMul, &[self, other], v)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let &[r, c] = self.shape() else {
            return Err(Error::shape("transpose", format!("{:?} is not a matrix", self.shape())));
        };
        let d = self.value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.tape.push(Op::Transpose, &[self], Tensor::from_parts(vec![c, r], out))
    }

    pub fn conv2d(&self, kernel: &Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(kernel, "conv2d")?;
        let g = ConvGeom::for_conv2d(self.shape(), kernel.shape(), padding)?;
        let data = g.forward(self.value.data(), kernel.value.data());
        let v = Tensor::checked("conv2d", vec![g.c_out, g.oh, g.ow], data)?;
        self.tape.push(Op::Conv(g), &[self, kernel], v)
    }

    pub fn conv3d(&self, kernel: &Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(kernel, "conv3d")?;
        let g = ConvGeom::for_conv3d(self.shape(), kernel.shape(), padding)?;
        let data = g.forward(self.value.data(), kernel.value.data());
        let v = Tensor::checked("conv3d", vec![g.c_out, g.ot, g.oh, g.ow], data)?;
        self.tape.push(Op::Conv(g), &[self, kernel], v)
    }

    /// Softmax over all entries of a `1×H×W` map.
    pub fn softmax_spatial(&self) -> Result<Var<'t>> {
        let v = self.value.softmax_spatial()?;
        self.tape.push(Op::Softmax, &[self], v)
    }

    /// `C×H×W` → `C`.
    pub fn spatial_avg_pool(&self) -> Result<Var<'t>> {
        let v = self.value.spatial_avg_pool()?;
        self.tape.push(Op::SpatialAvgPool, &[self], v)
    }

    /// 2×2 mean downsampling of a `C×H×W` map.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::shape("avg_pool2", format!("expected C×H×W, got {:?}", self.shape())));
        };
        if h < 2 || w < 2 {
            return Err(Error::shape("avg_pool2", format!("{h}×{w} too small to downsample")));
        }
        let data = kernels::avg_pool2(self.value.data(), c, h, w);
        let v = Tensor::from_parts(vec![c, h / 2, w / 2], data);
        self.tape.push(Op::AvgPool2 { c, h, w }, &[self], v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value.reshape(shape)?;
        self.tape.push(Op::Reshape, &[self], v)
    }

    /// Entries `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, inner_p) = axis_split(shape, axis);
        let stride: usize = shape[axis + 1..].iter().product();
        let inner_o = len * stride;
        let d = self.value.data();
        let mut data = Vec::with_capacity(outer * inner_o);
        for o in 0..outer {
            let src = o * inner_p + start * stride;
            data.extend_from_slice(&d[src..src + inner_o]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.push(
            Op::Narrow { axis, start },
            &[self],
            Tensor::from_parts(out_shape, data),
        )
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let mut s = 0.0;
        for v in self.value.data() {
            s += v;
        }
        let v = Tensor::checked("sum", vec![1], vec![s])?;
        self.tape.push(Op::Sum, &[self], v)
    }

    /// Arithmetic mean over the rows of an `R×K` matrix, giving a length-`K` vector.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let &[r, k] = self.shape() else {
            return Err(Error::shape("mean_rows", format!("{:?} is not a matrix", self.shape())));
        };
        let d = self.value.data();
        let mut acc = vec![0.0; k];
        for row in d.chunks(k) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = r as f64;
        let v = Tensor::from_parts(vec![k], acc.into_iter().map(|a| a / inv).collect());
        self.tape.push(Op::MeanRows, &[self], v)
    }

    /// Softmax cross-entropy of a logit vector against class `label`.
    pub fn cross_entropy(&self, label: usize) -> Result<Var<'t>> {
        let logits = self.value.data();
        if label >= logits.len() {
            return Err(Error::OutOfRange {
                what: "class label",
                index: label,
                size: logits.len(),
            });
        }
        let lse = kernels::log_sum_exp(logits);
        let loss = lse - logits[label];
        let probs = kernels::softmax(logits);
        let v = Tensor::checked("cross_entropy", vec![1], vec![loss])?;
        self.tape.push(Op::CrossEntropy { probs, label }, &[self], v)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        first.same_tape(p, "concat")?;
        let s = p.shape();
        let compatible = s.len() == rank
            && s.iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", format!("{s:?} vs {:?} on axis {axis}", first.shape())));
        }
        out_shape[axis] += s[axis];
    }
    let (outer, _) = axis_split(&out_shape, axis);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let (_, inner) = axis_split(p.shape(), axis);
            data.extend_from_slice(&p.value.data()[o * inner..(o + 1) * inner]);
        }
    }
    first
        .tape
        .push(Op::Concat { axis }, parts, Tensor::from_parts(out_shape, data))
}

/// Stacks equally shaped values along a new leading axis.
pub fn stack<'t>(parts: &[&Var<'t>]) -> Result<Var<'t>> {
    let lifted = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend_from_slice(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&lifted.iter().collect::<Vec<_>>(), 0)
}
