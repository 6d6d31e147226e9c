//! Define-by-run gradient tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and
//! enough information to run its vector-Jacobian product. Nodes are only ever
//! appended, so the node order is a topological order and [`Tape::backward`]
//! is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{contract, Result, TensorError};
use crate::tensor::{axis_split, matmul_kernel, Tensor};

/// A differentiable operation defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[1, n]` against lhs `[m, n]`
    Row,
    /// rhs is `[m, 1]` against lhs `[m, n]`
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        if lhs == rhs {
            return Some(Broadcast::Same);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Some(Broadcast::Scalar);
        }
        match (lhs, rhs) {
            ([_, n], [1, k]) if n == k => Some(Broadcast::Row),
            ([m, _], [k, 1]) if m == k => Some(Broadcast::Col),
            _ => None,
        }
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Col => i / cols,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
        bc: Broadcast,
    },
    Scale(usize, f64),
    AddScalar(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Softmax(usize),
    RmsNorm {
        input: usize,
        eps: f64,
    },
    Gelu(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Gather {
        input: usize,
        index: Rc<[usize]>,
    },
    Rope {
        input: usize,
        cos: Rc<[f64]>,
        sin: Rc<[f64]>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
            Op::Rope { .. } => "rope",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss through any
    /// differentiable path.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
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

    /// A differentiable leaf (parameter or probed input).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::Numeric { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary { lhs: a, rhs: b, .. } => {
                self.requires(*a) || self.requires(*b)
            }
            Op::Concat { parts, .. } => parts.iter().any(|&p| self.requires(p)),
            Op::Custom { inputs, .. } => inputs.iter().any(|&p| self.requires(p)),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Slice { input: a, .. }
            | Op::RmsNorm { input: a, .. }
            | Op::Gather { input: a, .. }
            | Op::Rope { input: a, .. } => self.requires(*a),
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn same_tape(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            contract("variables belong to different tapes")
        }
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return contract("concat of zero tensors");
        }
        for p in parts {
            self.same_tape(*p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return contract(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return contract(format!(
                    "concat shape mismatch on axis {axis}: {base:?} vs {s:?}"
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let ext = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * ext..(o + 1) * ext]);
            }
        }
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Records a value computed outside the tape together with its VJP rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        for v in inputs {
            self.same_tape(*v)?;
        }
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.same_tape(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = node_vjp(&nodes, node, &g)?;
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input], contrib);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&contrib),
        None => *slot = Some(contrib),
    }
}

fn node_vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &*node.value;
    let gd = g.data();
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            let mut res = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let ga = matmul_kernel(gd, val(*b).data(), m, n, k, false, true);
                res.push((*a, Tensor::from_parts(vec![m, k], ga)));
            }
            if nodes[*b].requires_grad {
                let gb = matmul_kernel(val(*a).data(), gd, k, m, n, true, false);
                res.push((*b, Tensor::from_parts(vec![k, n], gb)));
            }
            res
        }
        Op::Binary { kind, lhs, rhs, bc } => {
            let a = val(*lhs);
            let b = val(*rhs);
            let cols = *a.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            let ad = a.data();
            let bd = b.data();
            for i in 0..ga.len() {
                let j = bc.index(i, cols);
                match kind {
                    BinaryKind::Add => {
                        ga[i] = gd[i];
                        gb[j] += gd[i];
                    }
                    BinaryKind::Sub => {
                        ga[i] = gd[i];
                        gb[j] -= gd[i];
                    }
                    BinaryKind::Mul => {
                        ga[i] = gd[i] * bd[j];
                        gb[j] += gd[i] * ad[i];
                    }
                }
            }
            vec![
                (*lhs, Tensor::from_parts(a.shape().to_vec(), ga)),
                (*rhs, Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let (outer, _, inner) = axis_split(shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let ps = val(p).shape();
                let ext = ps[*axis] * inner;
                let mut d = Vec::with_capacity(val(p).numel());
                for o in 0..outer {
                    let base = o * total + offset;
                    d.extend_from_slice(&gd[base..base + ext]);
                }
                offset += ext;
                res.push((p, Tensor::from_parts(ps.to_vec(), d)));
            }
            res
        }
        Op::Slice { input, axis, start } => {
            let ishape = val(*input).shape();
            let (outer, extent, inner) = axis_split(ishape, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; val(*input).numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * extent * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![(*input, Tensor::from_parts(ishape.to_vec(), d))]
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2()?;
            vec![(*a, Tensor::from_parts(vec![c, r], transpose_data(gd, r, c)))]
        }
        Op::Reshape(a) => vec![(
            *a,
            Tensor::from_parts(val(*a).shape().to_vec(), gd.to_vec()),
        )],
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.len() / n.max(1) {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &gd[r * n..(r + 1) * n];
                let dotp: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[r * n + j] = ys[j] * (gs[j] - dotp);
                }
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::RmsNorm { input, eps } => {
            let x = val(*input).data();
            let y = out.data();
            let n = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; x.len()];
            for r in 0..x.len() / n.max(1) {
                let xs = &x[r * n..(r + 1) * n];
                let ms: f64 = xs.iter().map(|v| v * v).sum::<f64>() / n as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                let gs = &gd[r * n..(r + 1) * n];
                let ys = &y[r * n..(r + 1) * n];
                let mean_gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    d[r * n + j] = inv * (gs[j] - ys[j] * mean_gy);
                }
            }
            vec![(*input, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let d = x
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| gv * gelu_grad(v))
                .collect();
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::Abs(a) => {
            let x = val(*a).data();
            let d = x
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
        }
        Op::Gather { input, index } => {
            let mut d = vec![0.0; val(*input).numel()];
            for (o, &src) in index.iter().enumerate() {
                d[src] += gd[o];
            }
            vec![(*input, Tensor::from_parts(val(*input).shape().to_vec(), d))]
        }
        Op::Rope { input, cos, sin } => {
            let mut d = vec![0.0; gd.len()];
            for p in 0..cos.len() {
                let (c, s) = (cos[p], sin[p]);
                let (g0, g1) = (gd[2 * p], gd[2 * p + 1]);
                d[2 * p] = g0 * c + g1 * s;
                d[2 * p + 1] = -g0 * s + g1 * c;
            }
            vec![(*input, Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = op.vjp(&ins, out, g)?;
            if gs.len() != inputs.len() {
                return contract(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    inputs.len()
                ));
            }
            for (gi, xi) in gs.iter().zip(&ins) {
                if gi.shape() != xi.shape() {
                    return contract(format!("custom op {} gradient shape mismatch", op.name()));
                }
            }
            inputs.iter().copied().zip(gs).collect()
        }
    })
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// A fresh differentiable leaf holding this value; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.var((*self.value()).clone())
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return contract(format!("matmul inner dims differ: [{m},{k}] x [{k2},{n}]"));
        }
        let data = matmul_kernel(a.data(), b.data(), m, k, n, false, false);
        self.tape.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, rhs.id),
        )
    }

    fn binary(self, rhs: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.tape.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let Some(bc) = Broadcast::resolve(a.shape(), b.shape()) else {
            return contract(format!(
                "cannot broadcast {:?} onto {:?}",
                b.shape(),
                a.shape()
            ));
        };
        let cols = *a.shape().last().unwrap_or(&1);
        let (ad, bd) = (a.data(), b.data());
        let data = (0..ad.len())
            .map(|i| {
                let y = bd[bc.index(i, cols)];
                match kind {
                    BinaryKind::Add => ad[i] + y,
                    BinaryKind::Sub => ad[i] - y,
                    BinaryKind::Mul => ad[i] * y,
                }
            })
            .collect();
        self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: rhs.id,
                bc,
            },
        )
    }

    /// Elementwise sum; `rhs` may be `[1,n]`, `[m,1]` or a single value.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Var::add`].
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + s);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return contract(format!(
                "slice [{start}, {}) of axis {axis} out of range for {shape:?}",
                start + len
            ));
        }
        let (outer, extent, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        self.tape.push(
            Tensor::from_parts(vec![c, r], transpose_data(v.data(), r, c)),
            Op::Transpose(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = *v.shape().last().unwrap_or(&1);
        if n == 0 {
            return contract("softmax over an empty axis");
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Softmax(self.id),
        )
    }

    /// RMS normalization over the last axis, no learned gain.
    pub fn rmsnorm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let n = *v.shape().last().unwrap_or(&1);
        if n == 0 {
            return contract("rmsnorm over an empty axis");
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let ms: f64 = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::RmsNorm {
                input: self.id,
                eps,
            },
        )
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        let v = self.value().map(gelu);
        self.tape.push(v, Op::Gelu(self.id))
    }

    /// Absolute value; the backward rule uses subgradient 0 at 0.
    pub fn abs(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::abs);
        self.tape.push(v, Op::Abs(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum_all();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return contract("mean of an empty tensor");
        }
        let s = v.sum_all() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return contract("gather index length does not match output shape");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return contract(format!("gather index {bad} out of range {}", v.numel()));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather {
                input: self.id,
                index,
            },
        )
    }

    /// Rotates consecutive pairs `(x[2p], x[2p+1])` by per-pair angles given
    /// as cos/sin tables covering every pair of the flattened tensor.
    pub fn rope(self, cos: Rc<[f64]>, sin: Rc<[f64]>) -> Result<Var<'t>> {
        let v = self.value();
        if !v.numel().is_multiple_of(2) || cos.len() * 2 != v.numel() || sin.len() != cos.len() {
            return contract("rope tables must cover every pair of the input");
        }
        let x = v.data();
        let mut data = vec![0.0; x.len()];
        for p in 0..cos.len() {
            let (c, s) = (cos[p], sin[p]);
            let (x0, x1) = (x[2 * p], x[2 * p + 1]);
            data[2 * p] = x0 * c - x1 * s;
            data[2 * p + 1] = x0 * s + x1 * c;
        }
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Rope {
                input: self.id,
                cos,
                sin,
            },
        )
    }
}
