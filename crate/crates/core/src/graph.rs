//! Eager computation graph with reverse-mode differentiation.
//!
//! Forward values are computed at node insertion. The backward transform
//! emits ordinary graph nodes, so the result of [`Graph::grad`] is itself
//! differentiable — applying `grad` to a first-order gradient yields exact
//! second-order derivatives. The outer loop of a TTT layer depends on this:
//! it backpropagates through the inner loop's gradient step.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations. Everything else in the crate is a composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    BroadcastTo,
    SumTo,
    Concat,
    Narrow,
    TimeReverse,
    RowSum,
    BroadcastCols,
    Tanh,
    Exp,
    Erf,
    Sqrt,
    Recip,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::SumTo => "sum_to",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::TimeReverse => "time_reverse",
            OpKind::RowSum => "row_sum",
            OpKind::BroadcastCols => "broadcast_cols",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Erf => "erf",
            OpKind::Sqrt => "sqrt",
            OpKind::Recip => "recip",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let all = [
            Matmul, Transpose, Add, Sub, Mul, Scale, AddScalar, Sum, BroadcastTo, SumTo, Concat,
            Narrow, TimeReverse, RowSum, BroadcastCols, Tanh, Exp, Erf, Sqrt, Recip, Reshape,
        ];
        all.into_iter().find(|op| op.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Scalar(f64),
    Axis(usize),
    Narrow { axis: usize, start: usize, len: usize },
}

struct Node<E: Element> {
    op: OpKind,
    inputs: Vec<Var>,
    aux: Aux,
    value: Tensor<E>,
    requires_grad: bool,
}

pub struct Graph<E: Element = f64> {
    nodes: Vec<Node<E>>,
    /// Test fixture: scales the named primitive's upstream adjoint, breaking
    /// its backward rule so negative-control verification can observe a failure.
    corrupt_backward: Option<OpKind>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), corrupt_backward: None }
    }

    pub fn with_corrupt_backward(op: OpKind) -> Self {
        Graph { nodes: Vec::new(), corrupt_backward: Some(op) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input node.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push_raw(OpKind::Leaf, vec![], Aux::None, value, true)
    }

    /// Non-trainable input node; gradients do not flow past it.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_raw(OpKind::Leaf, vec![], Aux::None, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(E::from_f64(v)))
    }

    /// Copy of an existing node's value as a fresh constant (gradient barrier).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(
        &mut self,
        op: OpKind,
        inputs: Vec<Var>,
        aux: Aux,
        value: Tensor<E>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { op, inputs, aux, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: OpKind, inputs: Vec<Var>, aux: Aux, value: Tensor<E>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(op, inputs, aux, value, rg)
    }

    // ----- primitives ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(OpKind::Matmul, vec![a, b], Aux::None, v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(OpKind::Transpose, vec![a], Aux::None, v))
    }

    /// Elementwise add; a trailing-suffix shape on `b` broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add, vec![a, b], Aux::None, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(OpKind::Sub, vec![a, b], Aux::None, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(OpKind::Mul, vec![a, b], Aux::None, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(E::from_f64(c))?;
        Ok(self.push(OpKind::Scale, vec![a], Aux::Scalar(c), v))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).add_scalar(E::from_f64(c))?;
        Ok(self.push(OpKind::AddScalar, vec![a], Aux::Scalar(c), v))
    }

    /// Sum of all elements; result is a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_all()?;
        Ok(self.push(OpKind::Sum, vec![a], Aux::None, v))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).broadcast_to(shape)?;
        Ok(self.push(OpKind::BroadcastTo, vec![a], Aux::None, v))
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).sum_to(shape)?;
        Ok(self.push(OpKind::SumTo, vec![a], Aux::None, v))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(OpKind::Concat, parts.to_vec(), Aux::Axis(axis), v))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(OpKind::Narrow, vec![a], Aux::Narrow { axis, start, len }, v))
    }

    /// Reverse the sequence (leading) axis.
    pub fn time_reverse(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).reverse_axis(0)?;
        Ok(self.push(OpKind::TimeReverse, vec![a], Aux::Axis(0), v))
    }

    /// Sum the last axis of a rank-2 tensor, keeping it: [r, c] -> [r, 1].
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sum()?;
        Ok(self.push(OpKind::RowSum, vec![a], Aux::None, v))
    }

    /// Repeat a [r, 1] column across c columns.
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        let v = self.value(a).broadcast_cols(c)?;
        Ok(self.push(OpKind::BroadcastCols, vec![a], Aux::Axis(c), v))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).tanh()?;
        Ok(self.push(OpKind::Tanh, vec![a], Aux::None, v))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).exp()?;
        Ok(self.push(OpKind::Exp, vec![a], Aux::None, v))
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).erf()?;
        Ok(self.push(OpKind::Erf, vec![a], Aux::None, v))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sqrt()?;
        Ok(self.push(OpKind::Sqrt, vec![a], Aux::None, v))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).recip()?;
        Ok(self.push(OpKind::Recip, vec![a], Aux::None, v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(OpKind::Reshape, vec![a], Aux::None, v))
    }

    /// Promote `b` when its shape is a trailing suffix of `a`'s (leading batch
    /// broadcast); symmetric in the other direction. Exact matches pass through.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            Ok((a, b))
        } else if is_suffix(&sb, &sa) {
            let nb = self.broadcast_to(b, &sa)?;
            Ok((a, nb))
        } else if is_suffix(&sa, &sb) {
            let na = self.broadcast_to(a, &sb)?;
            Ok((na, b))
        } else {
            Err(Error::shape(op, format!("lhs {sa:?} vs rhs {sb:?} (broadcast is leading-batch only)")))
        }
    }

    // ----- reverse-mode transform ----------------------------------------------

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The returned vars live in the same graph and may be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalarOutput(self.shape(output).to_vec()));
        }

        // ancestor set of the output
        let mut reachable = vec![false; output.0 + 1];
        reachable[output.0] = true;
        let mut stack = vec![output.0];
        while let Some(id) = stack.pop() {
            for i in 0..self.nodes[id].inputs.len() {
                let inp = self.nodes[id].inputs[i].0;
                if !reachable[inp] {
                    reachable[inp] = true;
                    stack.push(inp);
                }
            }
        }
        for (i, w) in wrt.iter().enumerate() {
            if w.0 > output.0 || !reachable[w.0] {
                return Err(Error::Unreachable(format!("wrt[{i}] (node #{})", w.0)));
            }
        }

        // needs-grad cone: nodes through which some wrt is reachable. The
        // sweep never leaves it, so nested grad calls stay local to their
        // own subgraphs instead of revisiting the whole upstream network.
        let mut need = vec![false; output.0 + 1];
        for w in wrt {
            need[w.0] = true;
        }
        for id in 0..=output.0 {
            if !need[id] && self.nodes[id].inputs.iter().any(|v| need[v.0]) {
                need[id] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed_shape = self.shape(output).to_vec();
        let seed = self.constant(Tensor::ones(&seed_shape));
        adj[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            if !need[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op;
            if op == OpKind::Leaf {
                continue;
            }
            let inputs = self.nodes[id].inputs.clone();
            let aux = self.nodes[id].aux.clone();
            let g = if self.corrupt_backward == Some(op) {
                self.scale(g, 1.5)?
            } else {
                g
            };
            self.backward_one(op, &inputs, &aux, Var(id), g, &mut adj, &need)?;
        }

        wrt.iter()
            .map(|w| {
                adj[w.0].ok_or_else(|| Error::Unreachable(format!("node #{}", w.0)))
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, delta: Var) -> Result<()> {
        adj[target.0] = Some(match adj[target.0] {
            None => delta,
            Some(prev) => self.add(prev, delta)?,
        });
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_one(
        &mut self,
        op: OpKind,
        inputs: &[Var],
        aux: &Aux,
        out: Var,
        g: Var,
        adj: &mut [Option<Var>],
        need: &[bool],
    ) -> Result<()> {
        // deltas are only built for inputs inside the needs-grad cone
        let needed = |v: Var| need[v.0];
        match op {
            OpKind::Leaf => {}
            OpKind::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needed(a) {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(adj, a, da)?;
                }
                if needed(b) {
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            OpKind::Transpose => {
                if needed(inputs[0]) {
                    let da = self.transpose(g)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Add => {
                if needed(inputs[0]) {
                    self.accumulate(adj, inputs[0], g)?;
                }
                if needed(inputs[1]) {
                    self.accumulate(adj, inputs[1], g)?;
                }
            }
            OpKind::Sub => {
                if needed(inputs[0]) {
                    self.accumulate(adj, inputs[0], g)?;
                }
                if needed(inputs[1]) {
                    let ng = self.scale(g, -1.0)?;
                    self.accumulate(adj, inputs[1], ng)?;
                }
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needed(a) {
                    let da = self.mul(g, b)?;
                    self.accumulate(adj, a, da)?;
                }
                if needed(b) {
                    let db = self.mul(g, a)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            OpKind::Scale => {
                let Aux::Scalar(c) = aux else { unreachable!() };
                if needed(inputs[0]) {
                    let da = self.scale(g, *c)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::AddScalar => {
                if needed(inputs[0]) {
                    self.accumulate(adj, inputs[0], g)?;
                }
            }
            OpKind::Sum => {
                if needed(inputs[0]) {
                    let shape = self.shape(inputs[0]).to_vec();
                    let da = self.broadcast_to(g, &shape)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::BroadcastTo => {
                if needed(inputs[0]) {
                    let shape = self.shape(inputs[0]).to_vec();
                    let da = self.sum_to(g, &shape)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::SumTo => {
                if needed(inputs[0]) {
                    let shape = self.shape(inputs[0]).to_vec();
                    let da = self.broadcast_to(g, &shape)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Concat => {
                let Aux::Axis(axis) = aux else { unreachable!() };
                let mut offset = 0;
                for &part in inputs {
                    let len = self.shape(part)[*axis];
                    if needed(part) {
                        let dp = self.narrow(g, *axis, offset, len)?;
                        self.accumulate(adj, part, dp)?;
                    }
                    offset += len;
                }
            }
            OpKind::Narrow => {
                let Aux::Narrow { axis, start, len } = aux else { unreachable!() };
                if needed(inputs[0]) {
                    let full = self.shape(inputs[0]).to_vec();
                    let mut parts = Vec::with_capacity(3);
                    if *start > 0 {
                        let mut s = full.clone();
                        s[*axis] = *start;
                        parts.push(self.constant(Tensor::zeros(&s)));
                    }
                    parts.push(g);
                    let tail = full[*axis] - start - len;
                    if tail > 0 {
                        let mut s = full.clone();
                        s[*axis] = tail;
                        parts.push(self.constant(Tensor::zeros(&s)));
                    }
                    let da = self.concat(&parts, *axis)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::TimeReverse => {
                if needed(inputs[0]) {
                    let da = self.time_reverse(g)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::RowSum => {
                if needed(inputs[0]) {
                    let c = self.shape(inputs[0])[1];
                    let da = self.broadcast_cols(g, c)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::BroadcastCols => {
                if needed(inputs[0]) {
                    let da = self.row_sum(g)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Tanh => {
                if needed(inputs[0]) {
                    // d tanh = 1 - tanh^2, written against the forward output
                    let yy = self.mul(out, out)?;
                    let neg = self.scale(yy, -1.0)?;
                    let deriv = self.add_scalar(neg, 1.0)?;
                    let da = self.mul(g, deriv)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Exp => {
                if needed(inputs[0]) {
                    let da = self.mul(g, out)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Erf => {
                if needed(inputs[0]) {
                    // d erf = 2/sqrt(pi) * exp(-x^2)
                    let a = inputs[0];
                    let sq = self.mul(a, a)?;
                    let neg = self.scale(sq, -1.0)?;
                    let e = self.exp(neg)?;
                    let deriv = self.scale(e, 2.0 / std::f64::consts::PI.sqrt())?;
                    let da = self.mul(g, deriv)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Sqrt => {
                if needed(inputs[0]) {
                    // d sqrt = 1 / (2 sqrt(x))
                    let inv = self.recip(out)?;
                    let half = self.scale(inv, 0.5)?;
                    let da = self.mul(g, half)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Recip => {
                if needed(inputs[0]) {
                    // d (1/x) = -1/x^2
                    let yy = self.mul(out, out)?;
                    let prod = self.mul(g, yy)?;
                    let da = self.scale(prod, -1.0)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
            OpKind::Reshape => {
                if needed(inputs[0]) {
                    let shape = self.shape(inputs[0]).to_vec();
                    let da = self.reshape(g, &shape)?;
                    self.accumulate(adj, inputs[0], da)?;
                }
            }
        }
        Ok(())
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}
