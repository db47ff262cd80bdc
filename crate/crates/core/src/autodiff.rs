//! Scalar-graph automatic differentiation.
//!
//! A [`ScalarGraph`] is a topologically ordered list of primitive operations
//! over input coordinates and parameters. Derivatives with respect to the
//! inputs (up to order two) are obtained by pushing truncated second-order
//! Taylor jets forward along a set of input directions; parameter gradients of
//! any linear combination of those derivatives then come from a single reverse
//! sweep over the jet computation. Mixed second derivatives use polarization
//! over the direction `e_i + e_j`.
//!
//! Graphs are immutable after construction. Every evaluation writes into a
//! caller-owned [`Workspace`], so one graph can be evaluated concurrently from
//! several threads.

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input(usize),
    Param(usize),
    Const(f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Powi(NodeId, i32),
}

impl Op {
    fn operands(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => (None, None),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => (Some(a), Some(b)),
            Op::Neg(a) | Op::Tanh(a) | Op::Sin(a) | Op::Cos(a) | Op::Exp(a) | Op::Powi(a, _) => {
                (Some(a), None)
            }
        }
    }
}

/// A derivative of the graph output with respect to input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Derivative {
    Value,
    First(usize),
    Second(usize, usize),
}

impl Derivative {
    /// Builds a derivative from a multi-index such as `[0, 0]` for `∂²/∂x₀²`.
    pub fn from_multi_index(index: &[usize]) -> Result<Self> {
        match *index {
            [] => Ok(Derivative::Value),
            [i] => Ok(Derivative::First(i)),
            [i, j] => Ok(Derivative::Second(i.min(j), i.max(j))),
            _ => Err(Error::UnsupportedOrder(index.len())),
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Derivative::Value => 0,
            Derivative::First(_) => 1,
            Derivative::Second(..) => 2,
        }
    }

    fn max_coordinate(&self) -> Option<usize> {
        match *self {
            Derivative::Value => None,
            Derivative::First(i) => Some(i),
            Derivative::Second(i, j) => Some(i.max(j)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivativeRequest {
    pub output: usize,
    pub derivative: Derivative,
}

impl DerivativeRequest {
    pub fn new(output: usize, multi_index: &[usize]) -> Result<Self> {
        Ok(Self {
            output,
            derivative: Derivative::from_multi_index(multi_index)?,
        })
    }

    pub fn value(output: usize) -> Self {
        Self {
            output,
            derivative: Derivative::Value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGraph {
    nodes: Vec<Op>,
    num_inputs: usize,
    num_params: usize,
    outputs: Vec<NodeId>,
}

/// Per-call scratch buffers: forward jets and their adjoints.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    v: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    av: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Jet component of the output used by a plan.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Component {
    Value,
    D1(usize),
    D2(usize),
}

/// Directions to propagate and the linear combination of output jet
/// components that realizes a set of derivative terms.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub(crate) dirs: Vec<Vec<f64>>,
    pub(crate) comps: Vec<(Component, f64)>,
}

impl Plan {
    pub(crate) fn new(num_inputs: usize, terms: &[(Derivative, f64)]) -> Result<Self> {
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        let mut dir_index = |d: Vec<f64>| -> usize {
            if let Some(k) = dirs.iter().position(|e| *e == d) {
                k
            } else {
                dirs.push(d);
                dirs.len() - 1
            }
        };
        let unit = |i: usize| {
            let mut e = vec![0.0; num_inputs];
            e[i] = 1.0;
            e
        };
        let mut comps = Vec::new();
        for &(d, c) in terms {
            if let Some(m) = d.max_coordinate() {
                if m >= num_inputs {
                    return Err(Error::DimensionMismatch {
                        binding: "derivative coordinate",
                        expected: num_inputs,
                        got: m + 1,
                    });
                }
            }
            match d {
                Derivative::Value => comps.push((Component::Value, c)),
                Derivative::First(i) => comps.push((Component::D1(dir_index(unit(i))), c)),
                Derivative::Second(i, j) if i == j => {
                    comps.push((Component::D2(dir_index(unit(i))), c))
                }
                Derivative::Second(i, j) => {
                    // ∂ᵢ∂ⱼu = ½(D²_{eᵢ+eⱼ} − D²_{eᵢ} − D²_{eⱼ})
                    let mut both = unit(i);
                    both[j] = 1.0;
                    let kb = dir_index(both);
                    let ki = dir_index(unit(i));
                    let kj = dir_index(unit(j));
                    comps.push((Component::D2(kb), 0.5 * c));
                    comps.push((Component::D2(ki), -0.5 * c));
                    comps.push((Component::D2(kj), -0.5 * c));
                }
            }
        }
        Ok(Self { dirs, comps })
    }
}

/// `(f, f', f'', f''')` at `x` for the univariate primitives.
#[inline]
fn unary_derivs(op: &Op, x: f64) -> (f64, f64, f64, f64) {
    match *op {
        Op::Tanh(_) => {
            let y = x.tanh();
            let f1 = 1.0 - y * y;
            (y, f1, -2.0 * y * f1, (6.0 * y * y - 2.0) * f1)
        }
        Op::Sin(_) => {
            let (s, c) = x.sin_cos();
            (s, c, -s, -c)
        }
        Op::Cos(_) => {
            let (s, c) = x.sin_cos();
            (c, -s, -c, s)
        }
        Op::Exp(_) => {
            let e = x.exp();
            (e, e, e, e)
        }
        Op::Powi(_, n) => powi_derivs(x, n),
        _ => unreachable!("not a univariate primitive"),
    }
}

#[inline]
fn powi_derivs(x: f64, n: i32) -> (f64, f64, f64, f64) {
    if n == 0 {
        return (1.0, 0.0, 0.0, 0.0);
    }
    let nf = n as f64;
    let f0 = x.powi(n);
    let f1 = nf * x.powi(n - 1);
    let f2 = if n == 1 {
        0.0
    } else {
        nf * (nf - 1.0) * x.powi(n - 2)
    };
    let f3 = if n == 1 || n == 2 {
        0.0
    } else {
        nf * (nf - 1.0) * (nf - 2.0) * x.powi(n - 3)
    };
    (f0, f1, f2, f3)
}

#[inline]
fn recip_derivs(x: f64) -> (f64, f64, f64, f64) {
    let r = 1.0 / x;
    (r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
}

impl ScalarGraph {
    /// Validates bindings and topological order.
    pub fn from_nodes(
        nodes: Vec<Op>,
        num_inputs: usize,
        num_params: usize,
        outputs: Vec<NodeId>,
    ) -> Result<Self> {
        for (id, op) in nodes.iter().enumerate() {
            match *op {
                Op::Input(i) if i >= num_inputs => {
                    return Err(Error::InvalidConfig(format!(
                        "node {id} reads input {i} but the graph has {num_inputs} inputs"
                    )))
                }
                Op::Param(j) if j >= num_params => {
                    return Err(Error::InvalidConfig(format!(
                        "node {id} reads parameter {j} but the graph has {num_params} parameters"
                    )))
                }
                _ => {}
            }
            let (a, b) = op.operands();
            for operand in [a, b].into_iter().flatten() {
                if operand >= id {
                    return Err(Error::InvalidConfig(format!(
                        "node {id} uses operand {operand} which does not precede it"
                    )));
                }
            }
        }
        if outputs.is_empty() {
            return Err(Error::InvalidConfig("graph has no outputs".into()));
        }
        if let Some(&o) = outputs.iter().find(|&&o| o >= nodes.len()) {
            return Err(Error::InvalidConfig(format!(
                "output node {o} does not exist"
            )));
        }
        Ok(Self {
            nodes,
            num_inputs,
            num_params,
            outputs,
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    /// `u_θ(x)` for the first output.
    pub fn evaluate(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.input_derivative(x, theta, &DerivativeRequest::value(0))
    }

    /// Exact input derivative of the requested output.
    pub fn input_derivative(
        &self,
        x: &[f64],
        theta: &[f64],
        req: &DerivativeRequest,
    ) -> Result<f64> {
        let mut ws = Workspace::new();
        self.functional(
            x,
            theta,
            req.output,
            &[(req.derivative, 1.0)],
            None,
            &mut ws,
        )
    }

    /// Gradient with respect to θ of the scalar given by `input_derivative`.
    pub fn parameter_gradient(
        &self,
        x: &[f64],
        theta: &[f64],
        req: &DerivativeRequest,
    ) -> Result<Vec<f64>> {
        let mut ws = Workspace::new();
        let mut grad = vec![0.0; self.num_params];
        self.functional(
            x,
            theta,
            req.output,
            &[(req.derivative, 1.0)],
            Some((1.0, &mut grad)),
            &mut ws,
        )?;
        Ok(grad)
    }

    /// Evaluates `Σ c·D u(x)` over `terms` and, when `grad` is given as
    /// `(scale, buffer)`, adds `scale · ∇_θ` of that value into `buffer`.
    pub fn functional(
        &self,
        x: &[f64],
        theta: &[f64],
        output: usize,
        terms: &[(Derivative, f64)],
        grad: Option<(f64, &mut [f64])>,
        ws: &mut Workspace,
    ) -> Result<f64> {
        self.check_bindings(x, theta, output)?;
        if let Some((_, g)) = &grad {
            if g.len() != self.num_params {
                return Err(Error::DimensionMismatch {
                    binding: "gradient buffer",
                    expected: self.num_params,
                    got: g.len(),
                });
            }
        }
        let plan = Plan::new(self.num_inputs, terms)?;
        self.forward(x, theta, &plan.dirs, ws);
        let out = self.outputs[output];
        let k = plan.dirs.len();
        let value = plan
            .comps
            .iter()
            .map(|&(c, w)| {
                w * match c {
                    Component::Value => ws.v[out],
                    Component::D1(d) => ws.d1[out * k + d],
                    Component::D2(d) => ws.d2[out * k + d],
                }
            })
            .sum();
        if let Some((scale, g)) = grad {
            self.reverse(out, &plan, scale, ws, g);
        }
        Ok(value)
    }

    fn check_bindings(&self, x: &[f64], theta: &[f64], output: usize) -> Result<()> {
        if x.len() != self.num_inputs {
            return Err(Error::DimensionMismatch {
                binding: "inputs",
                expected: self.num_inputs,
                got: x.len(),
            });
        }
        if theta.len() != self.num_params {
            return Err(Error::DimensionMismatch {
                binding: "params",
                expected: self.num_params,
                got: theta.len(),
            });
        }
        if output >= self.outputs.len() {
            return Err(Error::DimensionMismatch {
                binding: "output",
                expected: self.outputs.len(),
                got: output + 1,
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], theta: &[f64], dirs: &[Vec<f64>], ws: &mut Workspace) {
        let n = self.nodes.len();
        let k = dirs.len();
        ws.v.clear();
        ws.v.resize(n, 0.0);
        ws.d1.clear();
        ws.d1.resize(n * k, 0.0);
        ws.d2.clear();
        ws.d2.resize(n * k, 0.0);
        let Workspace { v, d1, d2, .. } = ws;
        for (id, op) in self.nodes.iter().enumerate() {
            let o = id * k;
            match *op {
                Op::Input(i) => {
                    v[id] = x[i];
                    for (q, dir) in dirs.iter().enumerate() {
                        d1[o + q] = dir[i];
                    }
                }
                Op::Param(j) => v[id] = theta[j],
                Op::Const(c) => v[id] = c,
                Op::Add(a, b) => {
                    v[id] = v[a] + v[b];
                    for q in 0..k {
                        d1[o + q] = d1[a * k + q] + d1[b * k + q];
                        d2[o + q] = d2[a * k + q] + d2[b * k + q];
                    }
                }
                Op::Sub(a, b) => {
                    v[id] = v[a] - v[b];
                    for q in 0..k {
                        d1[o + q] = d1[a * k + q] - d1[b * k + q];
                        d2[o + q] = d2[a * k + q] - d2[b * k + q];
                    }
                }
                Op::Neg(a) => {
                    v[id] = -v[a];
                    for q in 0..k {
                        d1[o + q] = -d1[a * k + q];
                        d2[o + q] = -d2[a * k + q];
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (v[a], v[b]);
                    v[id] = av * bv;
                    for q in 0..k {
                        let (a1, b1) = (d1[a * k + q], d1[b * k + q]);
                        let (a2, b2) = (d2[a * k + q], d2[b * k + q]);
                        d1[o + q] = a1 * bv + av * b1;
                        d2[o + q] = a2 * bv + 2.0 * a1 * b1 + av * b2;
                    }
                }
                Op::Div(a, b) => {
                    let (r0, r1, r2, _) = recip_derivs(v[b]);
                    let av = v[a];
                    v[id] = av * r0;
                    for q in 0..k {
                        let (b1, b2) = (d1[b * k + q], d2[b * k + q]);
                        let (a1, a2) = (d1[a * k + q], d2[a * k + q]);
                        let rd1 = r1 * b1;
                        let rd2 = r2 * b1 * b1 + r1 * b2;
                        d1[o + q] = a1 * r0 + av * rd1;
                        d2[o + q] = a2 * r0 + 2.0 * a1 * rd1 + av * rd2;
                    }
                }
                Op::Tanh(a) | Op::Sin(a) | Op::Cos(a) | Op::Exp(a) | Op::Powi(a, _) => {
                    let (f0, f1, f2, _) = unary_derivs(op, v[a]);
                    v[id] = f0;
                    for q in 0..k {
                        let a1 = d1[a * k + q];
                        d1[o + q] = f1 * a1;
                        d2[o + q] = f2 * a1 * a1 + f1 * d2[a * k + q];
                    }
                }
            }
        }
    }

    fn reverse(&self, out: NodeId, plan: &Plan, scale: f64, ws: &mut Workspace, grad: &mut [f64]) {
        let n = self.nodes.len();
        let k = plan.dirs.len();
        ws.av.clear();
        ws.av.resize(n, 0.0);
        ws.a1.clear();
        ws.a1.resize(n * k, 0.0);
        ws.a2.clear();
        ws.a2.resize(n * k, 0.0);
        for &(c, w) in &plan.comps {
            match c {
                Component::Value => ws.av[out] += scale * w,
                Component::D1(d) => ws.a1[out * k + d] += scale * w,
                Component::D2(d) => ws.a2[out * k + d] += scale * w,
            }
        }
        let Workspace {
            v,
            d1,
            d2,
            av,
            a1,
            a2,
        } = ws;
        for id in (0..=out).rev() {
            let op = &self.nodes[id];
            let o = id * k;
            match *op {
                Op::Input(_) | Op::Const(_) => {}
                Op::Param(j) => grad[j] += av[id],
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    av[a] += av[id];
                    av[b] += sign * av[id];
                    for q in 0..k {
                        a1[a * k + q] += a1[o + q];
                        a2[a * k + q] += a2[o + q];
                        a1[b * k + q] += sign * a1[o + q];
                        a2[b * k + q] += sign * a2[o + q];
                    }
                }
                Op::Neg(a) => {
                    av[a] -= av[id];
                    for q in 0..k {
                        a1[a * k + q] -= a1[o + q];
                        a2[a * k + q] -= a2[o + q];
                    }
                }
                Op::Mul(a, b) => {
                    let (xv, yv) = (v[a], v[b]);
                    let ov = av[id];
                    let mut ga = ov * yv;
                    let mut gb = ov * xv;
                    for q in 0..k {
                        let (o1, o2) = (a1[o + q], a2[o + q]);
                        let (x1, y1) = (d1[a * k + q], d1[b * k + q]);
                        let (x2, y2) = (d2[a * k + q], d2[b * k + q]);
                        ga += o1 * y1 + o2 * y2;
                        gb += o1 * x1 + o2 * x2;
                        a1[a * k + q] += o1 * yv + 2.0 * o2 * y1;
                        a2[a * k + q] += o2 * yv;
                        a1[b * k + q] += o1 * xv + 2.0 * o2 * x1;
                        a2[b * k + q] += o2 * xv;
                    }
                    av[a] += ga;
                    av[b] += gb;
                }
                Op::Div(a, b) => {
                    // q = a · r with r = 1/b
                    let (r0, r1, r2, r3) = recip_derivs(v[b]);
                    let xv = v[a];
                    let ov = av[id];
                    let mut ga = ov * r0;
                    let mut gr = ov * xv;
                    let mut gb = 0.0;
                    for q in 0..k {
                        let (o1, o2) = (a1[o + q], a2[o + q]);
                        let (b1, b2) = (d1[b * k + q], d2[b * k + q]);
                        let (x1, x2) = (d1[a * k + q], d2[a * k + q]);
                        let rd1 = r1 * b1;
                        let rd2 = r2 * b1 * b1 + r1 * b2;
                        ga += o1 * rd1 + o2 * rd2;
                        gr += o1 * x1 + o2 * x2;
                        a1[a * k + q] += o1 * r0 + 2.0 * o2 * rd1;
                        a2[a * k + q] += o2 * r0;
                        // adjoints of the reciprocal jet
                        let rbar1 = o1 * xv + 2.0 * o2 * x1;
                        let rbar2 = o2 * xv;
                        gb += rbar1 * r2 * b1 + rbar2 * (r3 * b1 * b1 + r2 * b2);
                        a1[b * k + q] += rbar1 * r1 + 2.0 * rbar2 * r2 * b1;
                        a2[b * k + q] += rbar2 * r1;
                    }
                    gb += gr * r1;
                    av[a] += ga;
                    av[b] += gb;
                }
                Op::Tanh(a) | Op::Sin(a) | Op::Cos(a) | Op::Exp(a) | Op::Powi(a, _) => {
                    let (_, f1, f2, f3) = unary_derivs(op, v[a]);
                    let mut ga = av[id] * f1;
                    for q in 0..k {
                        let (o1, o2) = (a1[o + q], a2[o + q]);
                        let (x1, x2) = (d1[a * k + q], d2[a * k + q]);
                        ga += o1 * f2 * x1 + o2 * (f3 * x1 * x1 + f2 * x2);
                        a1[a * k + q] += o1 * f1 + 2.0 * o2 * f2 * x1;
                        a2[a * k + q] += o2 * f1;
                    }
                    av[a] += ga;
                }
            }
        }
    }
}

/// Incremental construction of a [`ScalarGraph`]; operands always precede
/// their consumers.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    num_inputs: usize,
    num_params: usize,
    outputs: Vec<NodeId>,
}

impl GraphBuilder {
    pub fn new(num_inputs: usize, num_params: usize) -> Self {
        Self {
            num_inputs,
            num_params,
            ..Default::default()
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, i: usize) -> NodeId {
        self.push(Op::Input(i))
    }

    pub fn param(&mut self, j: usize) -> NodeId {
        self.push(Op::Param(j))
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.push(Op::Const(c))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        self.push(Op::Powi(a, n))
    }

    pub fn output(&mut self, node: NodeId) -> &mut Self {
        self.outputs.push(node);
        self
    }

    pub fn build(self) -> Result<ScalarGraph> {
        ScalarGraph::from_nodes(self.nodes, self.num_inputs, self.num_params, self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn square() -> ScalarGraph {
        let mut b = GraphBuilder::new(1, 0);
        let x = b.input(0);
        let y = b.mul(x, x);
        b.output(y);
        b.build().unwrap()
    }

    #[test]
    fn evaluates_square() {
        assert_eq!(square().evaluate(&[3.0], &[]).unwrap(), 9.0);
    }

    #[test]
    fn evaluates_linear_in_param() {
        let mut b = GraphBuilder::new(1, 1);
        let x = b.input(0);
        let t = b.param(0);
        let y = b.mul(t, x);
        b.output(y);
        let g = b.build().unwrap();
        assert_eq!(g.evaluate(&[2.0], &[5.0]).unwrap(), 10.0);
    }

    #[test]
    fn dimension_mismatch_names_binding() {
        let err = square().evaluate(&[1.0, 2.0], &[]).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                binding: "inputs",
                ..
            }
        ));
        let err = square().evaluate(&[1.0], &[1.0]).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                binding: "params",
                ..
            }
        ));
    }

    #[test]
    fn cube_second_derivative() {
        let mut b = GraphBuilder::new(1, 0);
        let x = b.input(0);
        let y = b.powi(x, 3);
        b.output(y);
        let g = b.build().unwrap();
        let req = DerivativeRequest::new(0, &[0, 0]).unwrap();
        assert_eq!(g.input_derivative(&[2.0], &[], &req).unwrap(), 12.0);
    }

    #[test]
    fn separable_wave_mode_time_curvature() {
        // u = sin(πx)cos(2πt); u_tt(0.5, 0) = −4π²
        let mut b = GraphBuilder::new(2, 0);
        let x = b.input(0);
        let t = b.input(1);
        let pi = b.constant(PI);
        let two_pi = b.constant(2.0 * PI);
        let px = b.mul(pi, x);
        let tt = b.mul(two_pi, t);
        let s = b.sin(px);
        let c = b.cos(tt);
        let u = b.mul(s, c);
        b.output(u);
        let g = b.build().unwrap();
        let req = DerivativeRequest::new(0, &[1, 1]).unwrap();
        let v = g.input_derivative(&[0.5, 0.0], &[], &req).unwrap();
        assert!((v + 4.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn mixed_partial_by_polarization() {
        // u = x² t³ → u_xt = 6 x t²
        let mut b = GraphBuilder::new(2, 0);
        let x = b.input(0);
        let t = b.input(1);
        let x2 = b.powi(x, 2);
        let t3 = b.powi(t, 3);
        let u = b.mul(x2, t3);
        b.output(u);
        let g = b.build().unwrap();
        let req = DerivativeRequest::new(0, &[0, 1]).unwrap();
        let v = g.input_derivative(&[1.0, 2.0], &[], &req).unwrap();
        assert!((v - 24.0).abs() < 1e-12);
    }

    #[test]
    fn order_three_is_rejected() {
        assert!(matches!(
            DerivativeRequest::new(0, &[0, 0, 0]),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn affine_parameter_gradient() {
        // u = θ₁x + θ₂
        let mut b = GraphBuilder::new(1, 2);
        let x = b.input(0);
        let t1 = b.param(0);
        let t2 = b.param(1);
        let m = b.mul(t1, x);
        let u = b.add(m, t2);
        b.output(u);
        let g = b.build().unwrap();
        let grad = g
            .parameter_gradient(&[2.0], &[0.3, -1.0], &DerivativeRequest::value(0))
            .unwrap();
        assert_eq!(grad, vec![2.0, 1.0]);
    }

    #[test]
    fn gradient_of_curvature() {
        // u = θ₁x², ∂²u/∂x² = 2θ₁ → gradient (2)
        let mut b = GraphBuilder::new(1, 1);
        let x = b.input(0);
        let t = b.param(0);
        let x2 = b.mul(x, x);
        let u = b.mul(t, x2);
        b.output(u);
        let g = b.build().unwrap();
        let req = DerivativeRequest::new(0, &[0, 0]).unwrap();
        let grad = g.parameter_gradient(&[0.7], &[3.0], &req).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn division_and_exp_match_closed_form() {
        // u = exp(θx) / (1 + x²); check u_x and ∂θ u_xx against hand derivations
        let mut b = GraphBuilder::new(1, 1);
        let x = b.input(0);
        let t = b.param(0);
        let one = b.constant(1.0);
        let tx = b.mul(t, x);
        let e = b.exp(tx);
        let x2 = b.powi(x, 2);
        let den = b.add(one, x2);
        let u = b.div(e, den);
        b.output(u);
        let g = b.build().unwrap();
        let (xv, tv) = (0.4, 1.3);
        let ux = g
            .input_derivative(&[xv], &[tv], &DerivativeRequest::new(0, &[0]).unwrap())
            .unwrap();
        let d = 1.0 + xv * xv;
        let expect = (tv * xv).exp() * (tv / d - 2.0 * xv / (d * d));
        assert!((ux - expect).abs() < 1e-14);

        // finite differences in θ of u_xx
        let req = DerivativeRequest::new(0, &[0, 0]).unwrap();
        let grad = g.parameter_gradient(&[xv], &[tv], &req).unwrap();
        let h = 1e-6;
        let fp = g.input_derivative(&[xv], &[tv + h], &req).unwrap();
        let fm = g.input_derivative(&[xv], &[tv - h], &req).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        assert!((grad[0] - fd).abs() / fd.abs() < 1e-8);
    }

    #[test]
    fn rejects_non_topological_nodes() {
        let nodes = vec![Op::Input(0), Op::Add(0, 2), Op::Const(1.0)];
        assert!(ScalarGraph::from_nodes(nodes, 1, 0, vec![1]).is_err());
        let nodes = vec![Op::Param(3)];
        assert!(ScalarGraph::from_nodes(nodes, 0, 1, vec![0]).is_err());
    }

    #[test]
    fn reevaluation_is_bit_identical() {
        let g = square();
        let a = g.evaluate(&[0.123456789], &[]).unwrap();
        let b = g.evaluate(&[0.123456789], &[]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
