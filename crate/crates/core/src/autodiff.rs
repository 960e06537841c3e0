//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Tape`] computes its value eagerly and appends a
//! node recording its inputs. [`Tape::grad`] replays the tape backwards with
//! plain tensor arithmetic. [`Tape::grad_graph`] instead records the backward
//! pass as new tape nodes, so the resulting gradients can themselves be
//! differentiated; that path only supports the operations a feed-forward
//! network of linear layers, leaky-relu and dropout masks is built from.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Reshape(Var),
    SumAxis(Var),
    SumAll(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    LogSumExp { x: Var, axis: usize },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Max(Var, Var),
    Gather { x: Var, axis: usize, index: Arc<[usize]> },
    ScatterAdd { x: Var, axis: usize, index: Arc<[usize]> },
    Concat { parts: Vec<Var>, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A linear record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = tensor::broadcast_binary(self.value(a), self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Max(a, b), f64::max)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = tensor::broadcast_to(self.value(x), shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::BroadcastTo(x), rg))
    }

    /// Sums `x` down to a shape it was broadcast from.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = tensor::sum_to_shape(self.value(x), shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumTo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sums along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::sum_axis(self.value(x), axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumAxis(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Stabilized log-sum-exp along `axis`; the axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::logsumexp_axis(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSumExp { x, axis }, rg))
    }

    pub fn gather(&mut self, x: Var, axis: usize, index: Arc<[usize]>) -> Result<Var> {
        let value = tensor::gather_axis(self.value(x), axis, &index)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, axis, index }, rg))
    }

    /// Sums slices along `axis` into `size` buckets chosen by `index`.
    pub fn scatter_add(&mut self, x: Var, axis: usize, index: Arc<[usize]>, size: usize) -> Result<Var> {
        let value = tensor::scatter_add_axis(self.value(x), axis, &index, size)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScatterAdd { x, axis, index }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Euclidean norm along `axis` (kept as size 1).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sq = self.square(x);
        let s = self.sum_axis(sq, axis)?;
        Ok(self.sqrt(s))
    }

    /// `exp(x - logsumexp(x))` along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        let lse = self.logsumexp(x, axis)?;
        let mut kept = shape;
        kept[axis] = 1;
        let lse = self.reshape(lse, &kept)?;
        let centered = self.sub(x, lse)?;
        Ok(self.exp(centered))
    }

    fn check_scalar(&self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient requested of non-scalar output with shape {:?}",
                self.shape(out)
            )));
        }
        Ok(())
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check_scalar(out)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        adj[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for id in (0..=out.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contribs = self.local_grads(id, &g)?;
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
            }
        }
        Ok(Gradients { adj })
    }

    /// `d out / d input` for each of `inputs`, zero where unreachable.
    pub fn grad(&self, out: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(out)?;
        Ok(inputs.iter().map(|&v| g.wrt(self, v)).collect())
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let out = &self.nodes[id].value;
        let bin = |a: Var,
                   b: Var,
                   fa: &dyn Fn(f64, f64, f64) -> f64,
                   fb: &dyn Fn(f64, f64, f64) -> f64|
         -> Result<Vec<(Var, Tensor)>> {
            let (ta, tb) = (val(a), val(b));
            let mut res = Vec::with_capacity(2);
            let full_a = tensor::broadcast_to(ta, g.shape())?;
            let full_b = tensor::broadcast_to(tb, g.shape())?;
            if self.nodes[a.0].requires_grad {
                let d = zip3(g, &full_a, &full_b, fa);
                res.push((a, tensor::sum_to_shape(&d, ta.shape())?));
            }
            if self.nodes[b.0].requires_grad {
                let d = zip3(g, &full_a, &full_b, fb);
                res.push((b, tensor::sum_to_shape(&d, tb.shape())?));
            }
            Ok(res)
        };
        Ok(match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                vec![
                    (a, tensor::sum_to_shape(g, val(a).shape())?),
                    (b, tensor::sum_to_shape(g, val(b).shape())?),
                ]
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                vec![
                    (a, tensor::sum_to_shape(g, val(a).shape())?),
                    (b, tensor::sum_to_shape(&g.map(|v| -v), val(b).shape())?),
                ]
            }
            Op::Mul(a, b) => bin(*a, *b, &|g, _, y| g * y, &|g, x, _| g * x)?,
            Op::Div(a, b) => bin(*a, *b, &|g, _, y| g / y, &|g, x, y| -g * x / (y * y))?,
            Op::Max(a, b) => bin(*a, *b, &|g, x, y| if x >= y { g } else { 0.0 }, &|g, x, y| {
                if x >= y {
                    0.0
                } else {
                    g
                }
            })?,
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((a, tensor::matmul(g, &tensor::transpose(val(b))?)?));
                }
                if self.nodes[b.0].requires_grad {
                    res.push((b, tensor::matmul(&tensor::transpose(val(a))?, g)?));
                }
                res
            }
            Op::Transpose(x) => vec![(*x, tensor::transpose(g)?)],
            Op::BroadcastTo(x) => vec![(*x, tensor::sum_to_shape(g, val(*x).shape())?)],
            Op::SumTo(x) => vec![(*x, tensor::broadcast_to(g, val(*x).shape())?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::SumAxis(x) => vec![(*x, tensor::broadcast_to(g, val(*x).shape())?)],
            Op::SumAll(x) => {
                let s = g.item()?;
                vec![(*x, Tensor::full(val(*x).shape(), s))]
            }
            Op::Exp(x) => vec![(*x, zip2(g, out, |g, y| g * y))],
            Op::Log(x) => vec![(*x, zip2(g, val(*x), |g, x| g / x))],
            Op::Sqrt(x) => vec![(*x, zip2(g, out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }))],
            Op::Square(x) => vec![(*x, zip2(g, val(*x), |g, x| 2.0 * g * x))],
            Op::LeakyRelu(x, s) => {
                let s = *s;
                vec![(*x, zip2(g, val(*x), |g, x| if x > 0.0 { g } else { s * g }))]
            }
            Op::Sigmoid(x) => vec![(*x, zip2(g, out, |g, y| g * y * (1.0 - y)))],
            Op::LogSumExp { x, axis } => {
                let xv = val(*x);
                let (outer, len, inner) = tensor::split_axis(xv.shape(), *axis);
                let mut d = vec![0.0; xv.numel()];
                let (gd, od, xd) = (g.data(), out.data(), xv.data());
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            let p = (o * len + a) * inner + i;
                            let q = o * inner + i;
                            d[p] = if od[q] == f64::NEG_INFINITY {
                                0.0
                            } else {
                                gd[q] * (xd[p] - od[q]).exp()
                            };
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::Gather { x, axis, index } => {
                let size = val(*x).shape()[*axis];
                vec![(*x, tensor::scatter_add_axis(g, *axis, index, size)?)]
            }
            Op::ScatterAdd { x, axis, index } => {
                vec![(*x, tensor::gather_axis(g, *axis, index)?)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    res.push((p, tensor::narrow(g, *axis, start, len)?));
                    start += len;
                }
                res
            }
        })
    }

    /// Records the backward pass of `out` on the tape and returns one
    /// gradient node per entry of `inputs`. The returned nodes can be fed
    /// into further computation and differentiated again.
    pub fn grad_graph(&mut self, out: Var, inputs: &[Var]) -> Result<Vec<Var>> {
        self.check_scalar(out)?;
        let mut adj: Vec<Option<Var>> = vec![None; out.0 + 1];
        let seed = self.constant(Tensor::full(&self.shape(out).to_vec(), 1.0));
        adj[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let contribs: Vec<(Var, Var)> = match op {
                Op::Leaf => vec![],
                Op::Add(a, b) => vec![(a, self.reduce_like(g, a)?), (b, self.reduce_like(g, b)?)],
                Op::Sub(a, b) => {
                    let ga = self.reduce_like(g, a)?;
                    let n = self.neg(g);
                    vec![(a, ga), (b, self.reduce_like(n, b)?)]
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b)?;
                    let gb = self.mul(g, a)?;
                    vec![(a, self.reduce_like(ga, a)?), (b, self.reduce_like(gb, b)?)]
                }
                Op::Neg(x) => vec![(x, self.neg(g))],
                Op::Scale(x, c) => vec![(x, self.scale(g, c))],
                Op::AddScalar(x) => vec![(x, g)],
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let at = self.transpose(a)?;
                    vec![(a, self.matmul(g, bt)?), (b, self.matmul(at, g)?)]
                }
                Op::Transpose(x) => vec![(x, self.transpose(g)?)],
                Op::BroadcastTo(x) => vec![(x, self.reduce_like(g, x)?)],
                Op::SumTo(x) => {
                    let s = self.shape(x).to_vec();
                    vec![(x, self.broadcast_to(g, &s)?)]
                }
                Op::Reshape(x) => {
                    let s = self.shape(x).to_vec();
                    vec![(x, self.reshape(g, &s)?)]
                }
                Op::SumAxis(x) => {
                    let s = self.shape(x).to_vec();
                    vec![(x, self.broadcast_to(g, &s)?)]
                }
                Op::SumAll(x) => {
                    let s = self.shape(x).to_vec();
                    let g = self.reshape(g, &vec![1; s.len()])?;
                    vec![(x, self.broadcast_to(g, &s)?)]
                }
                Op::Square(x) => {
                    let gx = self.mul(g, x)?;
                    vec![(x, self.scale(gx, 2.0))]
                }
                Op::LeakyRelu(x, s) => {
                    // The slope pattern is piecewise constant in x.
                    let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { s });
                    let m = self.constant(mask);
                    vec![(x, self.mul(g, m)?)]
                }
                other => {
                    return Err(Error::Capability(format!(
                        "{} has no recorded backward rule",
                        op_name(&other)
                    )))
                }
            };
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                adj[v.0] = Some(match adj[v.0] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        let mut res = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let g = match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(v));
                    self.constant(z)
                }
            };
            res.push(g);
        }
        Ok(res)
    }

    fn reduce_like(&mut self, g: Var, like: Var) -> Result<Var> {
        if self.shape(g) == self.shape(like) {
            return Ok(g);
        }
        let s = self.shape(like).to_vec();
        self.sum_to(g, &s)
    }
}

/// Adjoints from one backward sweep.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero when `v` does not influence the
    /// output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.adj
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Div(..) => "div",
        Op::Max(..) => "maximum",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sqrt(_) => "sqrt",
        Op::Sigmoid(_) => "sigmoid",
        Op::LogSumExp { .. } => "logsumexp",
        Op::Gather { .. } => "gather",
        Op::ScatterAdd { .. } => "scatter_add",
        Op::Concat { .. } => "concat",
        _ => "operation",
    }
}
