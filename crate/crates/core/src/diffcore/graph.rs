//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape; inputs always precede their consumer,
//! so `backward` is a single sweep over the tape in reverse recording order.

use std::cell::{Ref, RefCell};

use super::kernels::{self, broadcast_offsets, reduce_to};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Op kinds addressable through [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    Subtract,
    Divide,
    Negate,
    Sum,
    Mean,
    Sigmoid,
    LeakyRelu(f64),
    Log,
    Exp,
    Square,
    /// Concatenate along the given axis (0 = rows, 1 = columns).
    Concat(usize),
    /// `(axis, start, end)` on a 2-D input.
    Slice(usize, usize, usize),
    /// Broadcast the first input to the shape of the second.
    Broadcast,
    Transpose,
    SoftmaxRows,
    LogSumExpRows,
    Clamp(f64, f64),
    GradientReversal(f64),
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumAxis(Var),
    Mean(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Broadcast(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Upsample(Var),
    GradReverse(Var, f64),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single forward recording. Confined to one thread; drop it after
/// `backward` and start a fresh graph for the next step.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Grads {
    /// Gradient of the loss with respect to a leaf `v`, if `v` required grad.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Total gradient for a parameter across all of its uses on the tape.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.nodes[node] {
                match &mut acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub(crate) fn param_entries(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.nodes[node].as_deref().map(|g| (pid, g)))
    }
}

impl ParamStore {
    /// Adds the gradients of every trainable parameter used on the tape.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        for (pid, g) in grads.param_entries() {
            let t = self.get_mut(pid);
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cannot broadcast {a:?} with {b:?}: ranks differ"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("{what} expects a 2-D tensor, got {shape:?}"))),
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} produced a non-finite value")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf { .. } => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                nodes[a.0].requires_grad || nodes[b.0].requires_grad
            }
            Op::Concat(vs, _) => vs.iter().any(|v| nodes[v.0].requires_grad),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::SumAxis(a)
            | Op::Mean(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Slice(a, _, _, _)
            | Op::Broadcast(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::Upsample(a)
            | Op::GradReverse(a, _) => nodes[a.0].requires_grad,
        };
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, t: &Tensor, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param },
            "leaf",
        )?;
        self.nodes.borrow_mut()[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false, None)
    }

    /// Records an input whose gradient should be computed.
    pub fn variable(&self, t: &Tensor) -> Result<Var> {
        self.leaf(t, true, None)
    }

    /// Records a parameter. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.leaf(t, t.requires_grad(), Some(id))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn values(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Dispatches an op by kind. Used by the per-op gradient suite.
    pub fn forward_op(&self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Multiply
            | OpKind::Subtract
            | OpKind::Divide
            | OpKind::Broadcast => 2,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        let x = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(x, inputs[1]),
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Multiply => self.mul(x, inputs[1]),
            OpKind::Subtract => self.sub(x, inputs[1]),
            OpKind::Divide => self.div(x, inputs[1]),
            OpKind::Negate => self.neg(x),
            OpKind::Sum => self.sum(x),
            OpKind::Mean => self.mean(x),
            OpKind::Sigmoid => self.sigmoid(x),
            OpKind::LeakyRelu(s) => self.leaky_relu(x, s),
            OpKind::Log => self.log(x),
            OpKind::Exp => self.exp(x),
            OpKind::Square => self.square(x),
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Slice(axis, s, e) => self.slice(x, axis, s, e),
            OpKind::Broadcast => {
                let shape = self.shape(inputs[1]);
                self.broadcast(x, &shape)
            }
            OpKind::Transpose => self.transpose(x),
            OpKind::SoftmaxRows => self.softmax_rows(x),
            OpKind::LogSumExpRows => self.logsumexp_rows(x),
            OpKind::Clamp(lo, hi) => self.clamp(x, lo, hi),
            OpKind::GradientReversal(l) => self.gradient_reversal(x, l),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = dims2(&sa, "matmul")?;
        let (k2, n) = dims2(&sb, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}: inner dims differ")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::matmul_nn(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(&sa, &sb)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            match (broadcast_offsets(&shape, &sa), broadcast_offsets(&shape, &sb)) {
                (None, None) => va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect(),
                (oa, ob) => {
                    let n: usize = shape.iter().product();
                    (0..n)
                        .map(|i| {
                            let x = va[oa.as_ref().map_or(i, |o| o[i])];
                            let y = vb[ob.as_ref().map_or(i, |o| o[i])];
                            f(x, y)
                        })
                        .collect()
                }
            }
        };
        self.push(shape, out, op, what)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "subtract")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "multiply")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "divide")
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, out, op, what)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a), "negate")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a), "add_scalar")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
            "leaky_relu",
        )
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a), "square")
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi), "clamp")
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn gradient_reversal(&self, a: Var, lambda: f64) -> Result<Var> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::contract(format!(
                "gradient reversal coefficient must be >= 0, got {lambda}"
            )));
        }
        self.unary(a, |x| x, Op::GradReverse(a, lambda), "gradient_reversal")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.values(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = {
            let v = self.values(a);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![1], vec![s], Op::Mean(a), "mean")
    }

    /// Sum over `axis` of a 2-D tensor, keeping the reduced dimension.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = dims2(&self.shape(a), "sum_axis")?;
        let v = self.values(a).to_vec();
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += v[i * c + j];
                    }
                }
                (vec![1, c], out)
            }
            1 => (
                vec![r, 1],
                (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect(),
            ),
            _ => return Err(Error::shape(format!("sum_axis: axis {axis} out of range"))),
        };
        self.push(shape, out, Op::SumAxis(a), "sum_axis")
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let dims: Vec<(usize, usize)> = shapes
            .iter()
            .map(|s| dims2(s, "concat"))
            .collect::<Result<_>>()?;
        let nodes = self.nodes.borrow();
        let (shape, out) = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape(format!("concat rows: column mismatch {shapes:?}")));
                }
                let out: Vec<f64> = parts
                    .iter()
                    .flat_map(|p| nodes[p.0].value.iter().copied())
                    .collect();
                (vec![dims.iter().map(|d| d.0).sum(), c], out)
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape(format!("concat cols: row mismatch {shapes:?}")));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (p, d) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&nodes[p.0].value[i * d.1..(i + 1) * d.1]);
                    }
                }
                (vec![r, total], out)
            }
            _ => return Err(Error::shape(format!("concat: axis {axis} out of range"))),
        };
        drop(nodes);
        self.push(shape, out, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// Rows or columns `start..end` of a 2-D tensor.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(&self.shape(a), "slice")?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of [{r}, {c}]"
            )));
        }
        let v = self.values(a);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], v[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        drop(v);
        self.push(shape, out, Op::Slice(a, axis, start, end), "slice")
    }

    /// Expands size-1 axes of `a` to `shape` (equal rank required).
    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let target = broadcast_shape(&sa, shape)?;
        if target != shape {
            return Err(Error::shape(format!("cannot broadcast {sa:?} to {shape:?}")));
        }
        let out = {
            let v = self.values(a);
            match broadcast_offsets(shape, &sa) {
                None => v.to_vec(),
                Some(offs) => offs.iter().map(|&o| v[o]).collect(),
            }
        };
        self.push(shape.to_vec(), out, Op::Broadcast(a), "broadcast")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c) = dims2(&self.shape(a), "transpose")?;
        let out = kernels::transpose(&self.values(a), r, c);
        self.push(vec![c, r], out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("cannot reshape {sa:?} into {shape:?}")));
        }
        let out = self.values(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a), "reshape")
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (r, c) = dims2(&self.shape(a), "softmax_rows")?;
        let mut out = self.values(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(vec![r, c], out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Row-wise `log(sum(exp(x)))`, computed with max shifting.
    pub fn logsumexp_rows(&self, a: Var) -> Result<Var> {
        let (r, c) = dims2(&self.shape(a), "logsumexp_rows")?;
        let out = {
            let v = self.values(a);
            v.chunks(c)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect()
        };
        self.push(vec![r, 1], out, Op::LogSumExpRows(a), "logsumexp_rows")
    }

    /// Bilinear resize of a `[h, w]` map to `[out_h, out_w]`.
    pub fn upsample_bilinear(&self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w) = dims2(&self.shape(a), "upsample_bilinear")?;
        let (ys, xs) = (kernels::bilinear_axis(h, out_h), kernels::bilinear_axis(w, out_w));
        let out = {
            let v = self.values(a);
            let mut out = Vec::with_capacity(out_h * out_w);
            for &(y0, y1, wy) in &ys {
                for &(x0, x1, wx) in &xs {
                    let top = v[y0 * w + x0] * (1.0 - wx) + v[y0 * w + x1] * wx;
                    let bot = v[y1 * w + x0] * (1.0 - wx) + v[y1 * w + x1] * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
            out
        };
        self.push(vec![out_h, out_w], out, Op::Upsample(a), "upsample_bilinear")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, g: Vec<f64>| -> Result<()> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            check_finite(&g, "backward")?;
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                slot => *slot = Some(g),
            }
            Ok(())
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: &Var| nodes[v.0].value.as_slice();
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf { .. } => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if needs(a) {
                        acc(&mut grads, *a, kernels::matmul_nt(&g, val(b), m, n, k))?;
                    }
                    if needs(b) {
                        acc(&mut grads, *b, kernels::matmul_tn(val(a), &g, m, k, n))?;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        let offs = broadcast_offsets(&node.shape, &nodes[a.0].shape);
                        acc(&mut grads, *a, reduce_to(&g, &offs, nodes[a.0].value.len()))?;
                    }
                    if needs(b) {
                        let offs = broadcast_offsets(&node.shape, &nodes[b.0].shape);
                        let mut gb = reduce_to(&g, &offs, nodes[b.0].value.len());
                        if sign < 0.0 {
                            gb.iter_mut().for_each(|x| *x = -*x);
                        }
                        acc(&mut grads, *b, gb)?;
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let is_div = matches!(node.op, Op::Div(..));
                    let oa = broadcast_offsets(&node.shape, &nodes[a.0].shape);
                    let ob = broadcast_offsets(&node.shape, &nodes[b.0].shape);
                    let (va, vb) = (val(a), val(b));
                    let at = |i: usize| va[oa.as_ref().map_or(i, |o| o[i])];
                    let bt = |i: usize| vb[ob.as_ref().map_or(i, |o| o[i])];
                    if needs(a) {
                        let full: Vec<f64> = (0..g.len())
                            .map(|i| if is_div { g[i] / bt(i) } else { g[i] * bt(i) })
                            .collect();
                        acc(&mut grads, *a, reduce_to(&full, &oa, va.len()))?;
                    }
                    if needs(b) {
                        let full: Vec<f64> = (0..g.len())
                            .map(|i| {
                                if is_div {
                                    let y = bt(i);
                                    -g[i] * at(i) / (y * y)
                                } else {
                                    g[i] * at(i)
                                }
                            })
                            .collect();
                        acc(&mut grads, *b, reduce_to(&full, &ob, vb.len()))?;
                    }
                }
                Op::Neg(a) => acc(&mut grads, *a, g.iter().map(|x| -x).collect())?,
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|x| c * x).collect())?,
                Op::AddScalar(a) | Op::Reshape(a) => acc(&mut grads, *a, g)?,
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; nodes[a.0].value.len()])?,
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    acc(&mut grads, *a, vec![g[0] / n as f64; n])?
                }
                Op::SumAxis(a) => match broadcast_offsets(&nodes[a.0].shape, &node.shape) {
                    Some(offs) => acc(&mut grads, *a, offs.iter().map(|&o| g[o]).collect())?,
                    None => acc(&mut grads, *a, g)?,
                },
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(
                        &mut grads,
                        *a,
                        g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    )?
                }
                Op::LeakyRelu(a, s) => acc(
                    &mut grads,
                    *a,
                    g.iter()
                        .zip(val(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                        .collect(),
                )?,
                Op::Log(a) => acc(
                    &mut grads,
                    *a,
                    g.iter().zip(val(a)).map(|(g, x)| g / x).collect(),
                )?,
                Op::Exp(a) => acc(
                    &mut grads,
                    *a,
                    g.iter().zip(&node.value).map(|(g, y)| g * y).collect(),
                )?,
                Op::Square(a) => acc(
                    &mut grads,
                    *a,
                    g.iter().zip(val(a)).map(|(g, x)| 2.0 * x * g).collect(),
                )?,
                Op::Clamp(a, lo, hi) => acc(
                    &mut grads,
                    *a,
                    g.iter()
                        .zip(val(a))
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                )?,
                Op::GradReverse(a, lambda) => {
                    acc(&mut grads, *a, g.iter().map(|x| -lambda * x).collect())?
                }
                Op::Concat(parts, axis) => {
                    let (r, total) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = (nodes[p.0].shape[0], nodes[p.0].shape[1]);
                        if needs(p) {
                            let gp = if *axis == 0 {
                                g[offset * total..(offset + pr) * total].to_vec()
                            } else {
                                let mut gp = Vec::with_capacity(r * pc);
                                for i in 0..r {
                                    gp.extend_from_slice(
                                        &g[i * total + offset..i * total + offset + pc],
                                    );
                                }
                                gp
                            };
                            acc(&mut grads, *p, gp)?;
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    if needs(a) {
                        check_finite(&g, "backward")?;
                        let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; r * c]);
                        let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        if *axis == 0 {
                            add(&mut ga[start * c..end * c], &g);
                        } else {
                            let w = end - start;
                            for i in 0..r {
                                add(&mut ga[i * c + start..i * c + end], &g[i * w..(i + 1) * w]);
                            }
                        }
                    }
                }
                Op::Broadcast(a) => {
                    let offs = broadcast_offsets(&node.shape, &nodes[a.0].shape);
                    acc(&mut grads, *a, reduce_to(&g, &offs, nodes[a.0].value.len()))?
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    acc(&mut grads, *a, kernels::transpose(&g, r, c))?
                }
                Op::SoftmaxRows(a) => {
                    let c = node.shape[1];
                    let y = &node.value;
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(&mut grads, *a, ga)?
                }
                Op::LogSumExpRows(a) => {
                    let c = nodes[a.0].shape[1];
                    let x = val(a);
                    let mut ga = vec![0.0; x.len()];
                    for (i, (xr, out)) in x.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                        let lse = node.value[i];
                        for j in 0..c {
                            out[j] = g[i] * (xr[j] - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga)?
                }
                Op::Upsample(a) => {
                    let (h, w) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let (oh, ow) = (node.shape[0], node.shape[1]);
                    let ys = kernels::bilinear_axis(h, oh);
                    let xs = kernels::bilinear_axis(w, ow);
                    let mut ga = vec![0.0; h * w];
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gv = g[oy * ow + ox];
                            ga[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            ga[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            ga[y1 * w + x0] += gv * wy * (1.0 - wx);
                            ga[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                    acc(&mut grads, *a, ga)?
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(pid) } => Some((pid, i)),
                _ => None,
            })
            .collect();
        Ok(Grads {
            nodes: grads,
            params,
        })
    }
}
