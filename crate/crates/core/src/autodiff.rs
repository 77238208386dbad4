//! Reverse-mode differentiation over a static graph of dense-matrix ops.
//!
//! A [`Graph`] is built once (shapes fixed and checked at build time) and
//! then evaluated many times against a flat parameter vector; HMC hits the
//! same graph millions of times, so evaluation allocates only the value
//! buffers. Nodes are matrix-level primitives (matmul, bias add, tanh,
//! sigmoid, softmax, logsumexp) plus fused likelihood heads whose adjoints
//! are known in closed form.
//!
//! Non-finite values abort evaluation immediately with the offending node
//! named. Gradients come back as one flat vector aligned with the
//! parameter layout, which is what the samplers and optimizers consume.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Fixed data; validated finite on insertion.
    Const(Arc<Array2<f64>>),
    /// Slice of the flat parameter vector, reshaped row-major.
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    /// Row-broadcast add: x (n,m) + b (1,m).
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise log-sum-exp, (n,m) -> (n,1).
    LogSumExp(NodeId),
    Square(NodeId),
    /// Sum of all entries, -> (1,1).
    Sum(NodeId),
    /// Sum_i [y_i l_i - softplus(l_i)]; logits (n,1), labels in {0,1}.
    BernoulliLogLik { logits: NodeId, labels: Arc<Array1<f64>> },
    /// Sum_i [l_{i,y_i} - logsumexp(l_i)]; logits (n,K).
    CategoricalLogLik { logits: NodeId, labels: Arc<Vec<usize>> },
    /// Sum_i log N(t_i; p_i, variance); predictions (n,1).
    GaussianLogLik { pred: NodeId, targets: Arc<Array1<f64>>, variance: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "bias-add",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::BernoulliLogLik { .. } => "bernoulli-loglik",
            Op::CategoricalLogLik { .. } => "categorical-loglik",
            Op::GaussianLogLik { .. } => "gaussian-loglik",
        }
    }
}

/// Static computation graph; build once, evaluate per parameter vector.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    n_params: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total length of the flat parameter vector this graph reads.
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shapes[id.0]
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.ops.push(op);
        self.shapes.push(shape);
        NodeId(self.ops.len() - 1)
    }

    /// Register a parameter block of the given shape; blocks occupy the
    /// flat vector in registration order.
    pub fn param(&mut self, rows: usize, cols: usize) -> NodeId {
        let offset = self.n_params;
        self.n_params += rows * cols;
        self.push(Op::Param { offset }, (rows, cols))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("constant inserted into graph"));
        }
        let shape = (value.nrows(), value.ncols());
        Ok(self.push(Op::Const(Arc::new(value)), shape))
    }

    /// Replace the data of a constant node; shape must match. Training
    /// loops use this to stream minibatches through one prebuilt graph.
    pub fn set_constant(&mut self, id: NodeId, value: Array2<f64>) -> Result<()> {
        if self.shapes[id.0] != (value.nrows(), value.ncols()) {
            return Err(Error::shape(
                "set_constant",
                format!("node is {:?}, got {}x{}", self.shapes[id.0], value.nrows(), value.ncols()),
            ));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("constant replaced in graph"));
        }
        match &mut self.ops[id.0] {
            Op::Const(slot) => {
                *slot = Arc::new(value);
                Ok(())
            }
            _ => Err(Error::invalid("set_constant on a non-constant node")),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shapes[a.0];
        let (br, bc) = self.shapes[b.0];
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} . {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul(a, b), (ar, bc)))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.shapes[x.0];
        let (br, bc) = self.shapes[b.0];
        if br != 1 || bc != xc {
            return Err(Error::shape("bias-add", format!("{xr}x{xc} + {br}x{bc}")));
        }
        Ok(self.push(Op::AddBias(x, b), (xr, xc)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(self.push(Op::Add(a, b), self.shapes[a.0]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(self.push(Op::Mul(a, b), self.shapes[a.0]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c), self.shapes[a.0])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a), self.shapes[a.0])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a), self.shapes[a.0])
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a), self.shapes[a.0])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shapes[a.0];
        self.push(Op::LogSumExp(a), (r, 1))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), self.shapes[a.0])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), (1, 1))
    }

    pub fn bernoulli_log_lik(&mut self, logits: NodeId, labels: Array1<f64>) -> Result<NodeId> {
        let (r, c) = self.shapes[logits.0];
        if c != 1 || r != labels.len() {
            return Err(Error::shape(
                "bernoulli-loglik",
                format!("logits {r}x{c}, {} labels", labels.len()),
            ));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("bernoulli labels must be 0 or 1"));
        }
        Ok(self.push(
            Op::BernoulliLogLik { logits, labels: Arc::new(labels) },
            (1, 1),
        ))
    }

    pub fn categorical_log_lik(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (r, k) = self.shapes[logits.0];
        if r != labels.len() {
            return Err(Error::shape(
                "categorical-loglik",
                format!("logits {r}x{k}, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        Ok(self.push(
            Op::CategoricalLogLik { logits, labels: Arc::new(labels) },
            (1, 1),
        ))
    }

    pub fn gaussian_log_lik(
        &mut self,
        pred: NodeId,
        targets: Array1<f64>,
        variance: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.shapes[pred.0];
        if c != 1 || r != targets.len() {
            return Err(Error::shape(
                "gaussian-loglik",
                format!("pred {r}x{c}, {} targets", targets.len()),
            ));
        }
        if !(variance > 0.0) {
            return Err(Error::invalid("gaussian-loglik needs variance > 0"));
        }
        Ok(self.push(
            Op::GaussianLogLik { pred, targets: Arc::new(targets), variance },
            (1, 1),
        ))
    }

    /// Evaluate every node against `params`.
    pub fn forward(&self, params: &[f64]) -> Result<Forward<'_>> {
        if params.len() != self.n_params {
            return Err(Error::shape(
                "forward",
                format!("graph reads {} params, got {}", self.n_params, params.len()),
            ));
        }
        let mut values: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let value = match op {
                // Const values are read through the Arc, not copied.
                Op::Const(_) => None,
                Op::Param { offset } => {
                    let (r, c) = self.shapes[idx];
                    let slice = &params[*offset..*offset + r * c];
                    Some(
                        Array2::from_shape_vec((r, c), slice.to_vec())
                            .expect("param shape bookkeeping"),
                    )
                }
                Op::MatMul(a, b) => {
                    let va = value_of(&values, &self.ops, *a);
                    let vb = value_of(&values, &self.ops, *b);
                    Some(va.dot(vb))
                }
                Op::AddBias(x, b) => {
                    let vx = value_of(&values, &self.ops, *x);
                    let vb = value_of(&values, &self.ops, *b);
                    Some(vx + &vb.row(0))
                }
                Op::Add(a, b) => {
                    Some(value_of(&values, &self.ops, *a) + value_of(&values, &self.ops, *b))
                }
                Op::Mul(a, b) => {
                    Some(value_of(&values, &self.ops, *a) * value_of(&values, &self.ops, *b))
                }
                Op::Scale(a, c) => Some(value_of(&values, &self.ops, *a) * *c),
                Op::Tanh(a) => Some(value_of(&values, &self.ops, *a).mapv(f64::tanh)),
                Op::Sigmoid(a) => Some(value_of(&values, &self.ops, *a).mapv(sigmoid)),
                Op::Softmax(a) => Some(softmax_rows(value_of(&values, &self.ops, *a))),
                Op::LogSumExp(a) => {
                    let v = value_of(&values, &self.ops, *a);
                    let mut out = Array2::zeros((v.nrows(), 1));
                    for (i, row) in v.rows().into_iter().enumerate() {
                        out[[i, 0]] = logsumexp_slice(row.as_slice().expect("row-major"));
                    }
                    Some(out)
                }
                Op::Square(a) => Some(value_of(&values, &self.ops, *a).mapv(|v| v * v)),
                Op::Sum(a) => {
                    let s = value_of(&values, &self.ops, *a).sum();
                    Some(Array2::from_elem((1, 1), s))
                }
                Op::BernoulliLogLik { logits, labels } => {
                    let l = value_of(&values, &self.ops, *logits);
                    let mut total = 0.0;
                    for (i, &y) in labels.iter().enumerate() {
                        let li = l[[i, 0]];
                        total += y * li - softplus(li);
                    }
                    Some(Array2::from_elem((1, 1), total))
                }
                Op::CategoricalLogLik { logits, labels } => {
                    let l = value_of(&values, &self.ops, *logits);
                    let mut total = 0.0;
                    for (i, &y) in labels.iter().enumerate() {
                        let row = l.row(i);
                        total += row[y] - logsumexp_slice(row.as_slice().expect("row-major"));
                    }
                    Some(Array2::from_elem((1, 1), total))
                }
                Op::GaussianLogLik { pred, targets, variance } => {
                    let p = value_of(&values, &self.ops, *pred);
                    let norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
                    let mut total = 0.0;
                    for (i, &t) in targets.iter().enumerate() {
                        let d = t - p[[i, 0]];
                        total += norm - d * d / (2.0 * variance);
                    }
                    Some(Array2::from_elem((1, 1), total))
                }
            };
            if let Some(v) = &value {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::non_finite(format!("{} node #{idx}", op.kind())));
                }
            }
            values.push(value);
        }
        Ok(Forward { graph: self, values })
    }

    /// Scalar value and flat gradient of a (1,1) output node.
    pub fn eval_with_grad(&self, output: NodeId, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward(params)?;
        let value = fwd.scalar(output)?;
        let grad = fwd.backward(output)?;
        Ok((value, grad))
    }
}

fn value_of<'a>(
    values: &'a [Option<Array2<f64>>],
    ops: &'a [Op],
    id: NodeId,
) -> &'a Array2<f64> {
    match &values[id.0] {
        Some(v) => v,
        None => match &ops[id.0] {
            Op::Const(c) => c,
            _ => unreachable!("only const nodes lack an evaluated value"),
        },
    }
}

/// One evaluated pass; exposes node values and reverse sweeps.
#[derive(Debug)]
pub struct Forward<'g> {
    graph: &'g Graph,
    values: Vec<Option<Array2<f64>>>,
}

impl Forward<'_> {
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        value_of(&self.values, &self.graph.ops, id)
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.dim() != (1, 1) {
            return Err(Error::shape("scalar", format!("node is {:?}", v.dim())));
        }
        Ok(v[[0, 0]])
    }

    /// Gradient of a scalar node with respect to the flat parameters.
    pub fn backward(&self, output: NodeId) -> Result<Vec<f64>> {
        let v = self.value(output);
        if v.dim() != (1, 1) {
            return Err(Error::shape("backward", format!("output is {:?}", v.dim())));
        }
        self.backward_seeded(output, Array2::ones((1, 1)).view())
    }

    /// Reverse sweep from `node` with an externally supplied adjoint.
    ///
    /// This is the hook for objectives whose final stage lives outside the
    /// graph: run forward, compute d(objective)/d(node) elsewhere, seed it
    /// here to get parameter gradients.
    pub fn backward_seeded(&self, node: NodeId, seed: ArrayView2<f64>) -> Result<Vec<f64>> {
        let g = self.graph;
        if seed.dim() != g.shapes[node.0] {
            return Err(Error::shape(
                "backward seed",
                format!("node is {:?}, seed {:?}", g.shapes[node.0], seed.dim()),
            ));
        }
        let mut adjoints: Vec<Option<Array2<f64>>> = vec![None; g.ops.len()];
        adjoints[node.0] = Some(seed.to_owned());
        let mut grad = vec![0.0; g.n_params];

        for idx in (0..=node.0).rev() {
            let Some(adj) = adjoints[idx].take() else { continue };
            match &g.ops[idx] {
                Op::Const(_) => {}
                Op::Param { offset } => {
                    let flat = adj.iter();
                    for (slot, a) in grad[*offset..*offset + adj.len()].iter_mut().zip(flat) {
                        *slot += a;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut adjoints, *a, adj.dot(&vb.t()));
                    accumulate(&mut adjoints, *b, va.t().dot(&adj));
                }
                Op::AddBias(x, b) => {
                    let col = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adjoints, *x, adj);
                    accumulate(&mut adjoints, *b, col);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, adj.clone());
                    accumulate(&mut adjoints, *b, adj);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut adjoints, *a, &adj * vb);
                    accumulate(&mut adjoints, *b, &adj * va);
                }
                Op::Scale(a, c) => accumulate(&mut adjoints, *a, &adj * *c),
                Op::Tanh(a) => {
                    let t = self.value(NodeId(idx));
                    accumulate(&mut adjoints, *a, &adj * &t.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let s = self.value(NodeId(idx));
                    accumulate(&mut adjoints, *a, &adj * &s.mapv(|v| v * (1.0 - v)));
                }
                Op::Softmax(a) => {
                    let s = self.value(NodeId(idx));
                    let mut out = Array2::zeros(s.dim());
                    for i in 0..s.nrows() {
                        let srow = s.row(i);
                        let arow = adj.row(i);
                        let dot = srow.dot(&arow);
                        for j in 0..s.ncols() {
                            out[[i, j]] = srow[j] * (arow[j] - dot);
                        }
                    }
                    accumulate(&mut adjoints, *a, out);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let lse = self.value(NodeId(idx));
                    let mut out = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let ai = adj[[i, 0]];
                        for j in 0..x.ncols() {
                            out[[i, j]] = ai * (x[[i, j]] - lse[[i, 0]]).exp();
                        }
                    }
                    accumulate(&mut adjoints, *a, out);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut adjoints, *a, &adj * &(x * 2.0));
                }
                Op::Sum(a) => {
                    let (r, c) = g.shapes[a.0];
                    accumulate(&mut adjoints, *a, Array2::from_elem((r, c), adj[[0, 0]]));
                }
                Op::BernoulliLogLik { logits, labels } => {
                    let l = self.value(*logits);
                    let a0 = adj[[0, 0]];
                    let mut out = Array2::zeros(l.dim());
                    for (i, &y) in labels.iter().enumerate() {
                        out[[i, 0]] = a0 * (y - sigmoid(l[[i, 0]]));
                    }
                    accumulate(&mut adjoints, *logits, out);
                }
                Op::CategoricalLogLik { logits, labels } => {
                    let l = self.value(*logits);
                    let a0 = adj[[0, 0]];
                    let mut out = softmax_rows(l);
                    out.mapv_inplace(|p| -p);
                    for (i, &y) in labels.iter().enumerate() {
                        out[[i, y]] += 1.0;
                    }
                    accumulate(&mut adjoints, *logits, out * a0);
                }
                Op::GaussianLogLik { pred, targets, variance } => {
                    let p = self.value(*pred);
                    let a0 = adj[[0, 0]];
                    let mut out = Array2::zeros(p.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        out[[i, 0]] = a0 * (t - p[[i, 0]]) / variance;
                    }
                    accumulate(&mut adjoints, *pred, out);
                }
            }
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("parameter gradient"));
        }
        Ok(grad)
    }
}

fn accumulate(adjoints: &mut [Option<Array2<f64>>], id: NodeId, contribution: Array2<f64>) {
    match &mut adjoints[id.0] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..row.len() {
            let e = (row[j] - m).exp();
            out[[i, j]] = e;
            z += e;
        }
        for j in 0..row.len() {
            out[[i, j]] /= z;
        }
    }
    out
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Differentiable scalar function of a flat vector; the gradient-check
/// oracle and the samplers both speak this shape.
pub trait DiffScalarFn {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// A graph plus its scalar output node, viewed as a function of params.
pub struct GraphFn {
    pub graph: Graph,
    pub output: NodeId,
}

impl DiffScalarFn for GraphFn {
    fn dim(&self) -> usize {
        self.graph.n_params()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.graph.forward(x)?.scalar(self.output)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.graph.eval_with_grad(self.output, x)
    }
}

/// Max relative error between the analytic gradient and central
/// differences with step `eps`, over all coordinates:
/// |analytic - numeric| / (|analytic| + eps).
pub fn check_gradient(f: &dyn DiffScalarFn, x: &[f64], eps: f64) -> Result<f64> {
    let (_, grad) = f.value_grad(x)?;
    if grad.len() != x.len() {
        return Err(Error::shape(
            "check_gradient",
            format!("grad len {}, x len {}", grad.len(), x.len()),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f.value(&probe)?;
        probe[i] = x[i] - eps;
        let down = f.value(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let rel = (grad[i] - numeric).abs() / (grad[i].abs() + eps);
        worst = worst.max(rel);
    }
    Ok(worst)
}
