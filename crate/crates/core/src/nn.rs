//! Small dense networks as differentiable log-likelihood factories.
//!
//! A network here is never trained in place; it is a shape ([`MlpSpec`])
//! plus a flat parameter vector, so the same weights can be a point
//! estimate, one HMC draw, or one mean-field sample depending on who is
//! holding the vector.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphFn, NodeId};
use crate::density::LogDensity;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Output head; fixes both the prediction transform and the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Head {
    /// Single logit, labels in {0,1}.
    Bernoulli,
    /// K logits, labels in 0..K.
    Categorical,
    /// Scalar output with fixed observation noise.
    Gaussian { variance: f64 },
    /// Raw output vector, no likelihood (feature extractor).
    Embedding,
}

/// Dense MLP shape: full layer widths, hidden activation, output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output layers"));
        }
        if layers.iter().any(|&w| w == 0) {
            return Err(Error::invalid("zero-width layer"));
        }
        let out = *layers.last().expect("checked len");
        match head {
            Head::Bernoulli if out != 1 => {
                return Err(Error::invalid(format!("bernoulli head needs output width 1, got {out}")))
            }
            Head::Gaussian { variance } => {
                if out != 1 {
                    return Err(Error::invalid(format!("gaussian head needs output width 1, got {out}")));
                }
                if !(variance > 0.0) {
                    return Err(Error::invalid("gaussian head needs variance > 0"));
                }
            }
            Head::Categorical if out < 2 => {
                return Err(Error::invalid("categorical head needs at least 2 classes"))
            }
            _ => {}
        }
        Ok(Self { layers, activation, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().expect("checked len")
    }

    /// Flat parameter count: per layer, weights (in x out) then bias (out).
    pub fn n_params(&self) -> usize {
        self.layers
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Xavier-style init, scaled by fan-in; deterministic under the rng.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for w in self.layers.windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                out.push(rng.sample::<f64, _>(StandardNormal) * scale);
            }
            out.extend(std::iter::repeat(0.0).take(w[1]));
        }
        out
    }
}

/// Class labels or regression targets paired with inputs.
#[derive(Debug, Clone)]
pub enum Labels {
    Binary(Array1<f64>),
    Classes(Vec<usize>),
    Real(Array1<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary(a) => a.len(),
            Labels::Classes(v) => v.len(),
            Labels::Real(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A design matrix with labels; rows are observations.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Array2<f64>,
    pub y: Labels,
}

impl LabeledBatch {
    pub fn new(x: Array2<f64>, y: Labels) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("batch with no rows".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::shape(
                "labeled batch",
                format!("{} rows, {} labels", x.nrows(), y.len()),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let x = self.x.select(ndarray::Axis(0), idx);
        let y = match &self.y {
            Labels::Binary(a) => Labels::Binary(idx.iter().map(|&i| a[i]).collect()),
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(a) => Labels::Real(idx.iter().map(|&i| a[i]).collect()),
        };
        Self { x, y }
    }

    /// Concatenate batches with identical label kinds.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat of no batches".into()))?;
        let cols = first.x.ncols();
        let total: usize = parts.iter().map(|b| b.len()).sum();
        let mut x = Array2::zeros((total, cols));
        let mut row = 0;
        for b in parts {
            if b.x.ncols() != cols {
                return Err(Error::shape("concat", "mixed input widths"));
            }
            x.slice_mut(ndarray::s![row..row + b.len(), ..]).assign(&b.x);
            row += b.len();
        }
        let y = match &first.y {
            Labels::Binary(_) => {
                let mut all = Vec::with_capacity(total);
                for b in parts {
                    match &b.y {
                        Labels::Binary(a) => all.extend(a.iter().copied()),
                        _ => return Err(Error::invalid("concat of mixed label kinds")),
                    }
                }
                Labels::Binary(Array1::from_vec(all))
            }
            Labels::Classes(_) => {
                let mut all = Vec::with_capacity(total);
                for b in parts {
                    match &b.y {
                        Labels::Classes(v) => all.extend(v.iter().copied()),
                        _ => return Err(Error::invalid("concat of mixed label kinds")),
                    }
                }
                Labels::Classes(all)
            }
            Labels::Real(_) => {
                let mut all = Vec::with_capacity(total);
                for b in parts {
                    match &b.y {
                        Labels::Real(a) => all.extend(a.iter().copied()),
                        _ => return Err(Error::invalid("concat of mixed label kinds")),
                    }
                }
                Labels::Real(Array1::from_vec(all))
            }
        };
        Ok(Self { x, y })
    }
}

/// A built network graph whose input constant can be swapped per batch.
pub struct MlpGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub output: NodeId,
}

fn build_trunk(g: &mut Graph, spec: &MlpSpec, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    let n_layers = spec.layers.len() - 1;
    for (li, w) in spec.layers.windows(2).enumerate() {
        let wid = g.param(w[0], w[1]);
        let bid = g.param(1, w[1]);
        h = g.matmul(h, wid)?;
        h = g.add_bias(h, bid)?;
        if li + 1 < n_layers {
            h = match spec.activation {
                Activation::Tanh => g.tanh(h),
                Activation::Sigmoid => g.sigmoid(h),
            };
        }
    }
    Ok(h)
}

/// Graph producing head-transformed outputs for a fixed input shape.
///
/// Bernoulli gives probabilities (n,1), categorical gives row-normalized
/// probabilities (n,K), gaussian and embedding give raw outputs.
pub fn build_forward_graph(spec: &MlpSpec, x: Array2<f64>) -> Result<MlpGraph> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::shape(
            "forward graph",
            format!("input width {}, spec wants {}", x.ncols(), spec.input_dim()),
        ));
    }
    let mut g = Graph::new();
    let input = g.constant(x)?;
    let raw = build_trunk(&mut g, spec, input)?;
    let output = match spec.head {
        Head::Bernoulli => g.sigmoid(raw),
        Head::Categorical => g.softmax(raw),
        Head::Gaussian { .. } | Head::Embedding => raw,
    };
    Ok(MlpGraph { graph: g, input, output })
}

/// Head-transformed predictions for one parameter vector.
pub fn forward(spec: &MlpSpec, params: &[f64], x: &Array2<f64>) -> Result<Array2<f64>> {
    let mg = build_forward_graph(spec, x.clone())?;
    let fwd = mg.graph.forward(params)?;
    Ok(fwd.value(mg.output).clone())
}

/// Log-likelihood graph of a batch under the spec's head.
pub fn build_log_lik_graph(spec: &MlpSpec, batch: &LabeledBatch) -> Result<GraphFn> {
    if batch.x.ncols() != spec.input_dim() {
        return Err(Error::shape(
            "log-lik graph",
            format!("input width {}, spec wants {}", batch.x.ncols(), spec.input_dim()),
        ));
    }
    let mut g = Graph::new();
    let input = g.constant(batch.x.clone())?;
    let raw = build_trunk(&mut g, spec, input)?;
    let output = match (&spec.head, &batch.y) {
        (Head::Bernoulli, Labels::Binary(y)) => g.bernoulli_log_lik(raw, y.clone())?,
        (Head::Categorical, Labels::Classes(y)) => g.categorical_log_lik(raw, y.clone())?,
        (Head::Gaussian { variance }, Labels::Real(y)) => {
            g.gaussian_log_lik(raw, y.clone(), *variance)?
        }
        (Head::Embedding, _) => {
            return Err(Error::invalid("embedding head has no likelihood"))
        }
        _ => return Err(Error::invalid("label kind does not match the head")),
    };
    Ok(GraphFn { graph: g, output })
}

/// Batch log-likelihood at one parameter vector.
pub fn log_likelihood(spec: &MlpSpec, params: &[f64], batch: &LabeledBatch) -> Result<f64> {
    let f = build_log_lik_graph(spec, batch)?;
    f.graph.forward(params)?.scalar(f.output)
}

/// log p(batch | params) + log prior(params).
pub fn log_posterior(
    spec: &MlpSpec,
    params: &[f64],
    batch: &LabeledBatch,
    prior: &dyn LogDensity,
) -> Result<f64> {
    Ok(log_likelihood(spec, params, batch)? + prior.log_density(params))
}

/// Sampling target: batch likelihood plus prior, with gradients.
///
/// The graph is built once against the full batch; every density query
/// re-evaluates it at the requested point. Infallible trait methods turn
/// evaluation failures (non-finite intermediates) into -inf / zero
/// gradient, which a Metropolis step then rejects.
pub struct MlpPosterior {
    lik: GraphFn,
    prior: Arc<dyn LogDensity>,
}

impl MlpPosterior {
    pub fn new(spec: &MlpSpec, batch: &LabeledBatch, prior: Arc<dyn LogDensity>) -> Result<Self> {
        let lik = build_log_lik_graph(spec, batch)?;
        if prior.dim() != lik.graph.n_params() {
            return Err(Error::shape(
                "posterior target",
                format!("prior dim {}, network has {}", prior.dim(), lik.graph.n_params()),
            ));
        }
        Ok(Self { lik, prior })
    }
}

impl LogDensity for MlpPosterior {
    fn dim(&self) -> usize {
        self.lik.graph.n_params()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        match self.lik.graph.forward(x).and_then(|f| f.scalar(self.lik.output)) {
            Ok(ll) => ll + self.prior.log_density(x),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.log_density_grad(x).1
    }

    fn log_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.lik.graph.eval_with_grad(self.lik.output, x) {
            Ok((ll, mut g)) => {
                let pg = self.prior.grad(x);
                for (gi, pi) in g.iter_mut().zip(pg) {
                    *gi += pi;
                }
                (ll + self.prior.log_density(x), g)
            }
            Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
        }
    }
}
