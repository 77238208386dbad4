//! Prototypical continual learning in an embedding space.
//!
//! Classes are summarized by Gaussian prototypes with diagonal
//! precisions and a Dirichlet weight over class frequencies; both update
//! in closed form from counts and class-mean embeddings, so past data
//! never needs revisiting. The embedder is trained by gradient ascent on
//! the posterior predictive of the labels, interleaved with the
//! conjugate updates, batch by batch.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp_slice;
use crate::data::{accuracy, argmax_rows, AccuracyMatrix, TaskStream};
use crate::io::{base64_to_floats, floats_to_base64};
use crate::nn::{build_forward_graph, Head, LabeledBatch, Labels, MlpSpec};
use crate::opt::Adam;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoConfig {
    pub embed_dim: usize,
    /// Initial Dirichlet concentration for a fresh class.
    pub alpha_init: f64,
    /// Shared diagonal embedding-noise variance.
    pub sigma_eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub coreset_per_task: usize,
    /// Also move the concentrations by gradient (in log space) during
    /// embedder steps; conjugate count updates happen regardless.
    pub learn_alpha: bool,
    pub seed: u64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            alpha_init: 0.7,
            sigma_eps: 0.05,
            lr: 1e-3,
            epochs: 50,
            batch_size: 256,
            coreset_per_task: 200,
            learn_alpha: true,
            seed: 0,
        }
    }
}

/// Conjugate posterior over class prototypes: per class a Dirichlet
/// concentration, a prototype mean, and a diagonal precision, plus the
/// shared embedding-noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoState {
    alpha: Vec<f64>,
    /// (J, E) prototype means.
    mu: Array2<f64>,
    /// (J, E) diagonal prototype precisions.
    lambda: Array2<f64>,
    /// (E,) noise variances.
    sigma_eps: Vec<f64>,
    alpha_init: f64,
    seed: u64,
}

impl ProtoState {
    pub fn new(embed_dim: usize, sigma_eps: f64, alpha_init: f64, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if !(sigma_eps > 0.0) || !(alpha_init > 0.0) {
            return Err(Error::invalid("noise variance and alpha init must be positive"));
        }
        Ok(Self {
            alpha: Vec::new(),
            mu: Array2::zeros((0, embed_dim)),
            lambda: Array2::zeros((0, embed_dim)),
            sigma_eps: vec![sigma_eps; embed_dim],
            alpha_init,
            seed,
        })
    }

    pub fn from_parts(
        alpha: Vec<f64>,
        mu: Array2<f64>,
        lambda: Array2<f64>,
        sigma_eps: Vec<f64>,
        alpha_init: f64,
        seed: u64,
    ) -> Result<Self> {
        let j = alpha.len();
        let e = sigma_eps.len();
        if mu.dim() != (j, e) || lambda.dim() != (j, e) {
            return Err(Error::shape(
                "prototype state",
                format!(
                    "{} classes, {} dims, means {:?}, precisions {:?}",
                    j,
                    e,
                    mu.dim(),
                    lambda.dim()
                ),
            ));
        }
        if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::invalid("concentrations must be positive"));
        }
        if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("precisions must be positive"));
        }
        if sigma_eps.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("noise variances must be positive"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("prototype means"));
        }
        if !(alpha_init > 0.0) {
            return Err(Error::invalid("alpha init must be positive"));
        }
        Ok(Self { alpha, mu, lambda, sigma_eps, alpha_init, seed })
    }

    pub fn n_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.sigma_eps.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn mu(&self) -> ArrayView2<'_, f64> {
        self.mu.view()
    }

    pub fn lambda(&self) -> ArrayView2<'_, f64> {
        self.lambda.view()
    }

    /// Create prototype rows for every class up to `max_label`. Fresh
    /// precisions are exponentiated standard normals, so positive;
    /// fresh means are zero.
    pub fn ensure_classes(&mut self, max_label: usize) {
        let e = self.embed_dim();
        while self.n_classes() <= max_label {
            let j = self.n_classes();
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ (j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            self.alpha.push(self.alpha_init);
            self.mu.push_row(Array2::zeros((1, e)).row(0)).expect("width fixed");
            let fresh: Vec<f64> =
                (0..e).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
            self.lambda
                .push_row(ndarray::ArrayView1::from(&fresh))
                .expect("width fixed");
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(Error::invalid(format!(
                "label {bad} but only {} prototype classes exist",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Count update: each observed label adds one to its concentration.
    pub fn update_dirichlet(&mut self, labels: &[usize]) -> Result<()> {
        self.check_labels(labels)?;
        for &y in labels {
            self.alpha[y] += 1.0;
        }
        Ok(())
    }

    /// Precision/mean update per observed class from the class count and
    /// the class-mean embedding; unobserved classes are untouched.
    pub fn update_prototypes(&mut self, z: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        self.check_labels(labels)?;
        let e = self.embed_dim();
        if z.dim() != (labels.len(), e) {
            return Err(Error::shape(
                "prototype update",
                format!("{} labels, embeddings {:?}", labels.len(), z.dim()),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("embeddings"));
        }
        let mut counts = vec![0usize; self.n_classes()];
        let mut sums = Array2::<f64>::zeros((self.n_classes(), e));
        for (row, &y) in z.rows().into_iter().zip(labels) {
            counts[y] += 1;
            let mut s = sums.row_mut(y);
            s += &row;
        }
        for j in 0..self.n_classes() {
            if counts[j] == 0 {
                continue;
            }
            let n = counts[j] as f64;
            for d in 0..e {
                let noise_prec = 1.0 / self.sigma_eps[d];
                let old_prec = self.lambda[[j, d]];
                let new_prec = old_prec + n * noise_prec;
                // New natural mean: data evidence plus carried prior.
                let nat = n * noise_prec * (sums[[j, d]] / n) + old_prec * self.mu[[j, d]];
                self.lambda[[j, d]] = new_prec;
                self.mu[[j, d]] = nat / new_prec;
            }
        }
        Ok(())
    }

    /// Per-class predictive variance: noise plus prototype uncertainty.
    fn predictive_variance(&self, j: usize) -> Vec<f64> {
        (0..self.embed_dim())
            .map(|d| self.sigma_eps[d] + 1.0 / self.lambda[[j, d]])
            .collect()
    }

    fn log_gaussian(&self, z_row: ndarray::ArrayView1<f64>, j: usize, var: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in 0..var.len() {
            let diff = z_row[d] - self.mu[[j, d]];
            acc -= 0.5 * ((2.0 * std::f64::consts::PI * var[d]).ln() + diff * diff / var[d]);
        }
        acc
    }

    /// Joint log posterior predictive of the labeled embeddings: class
    /// frequency term plus the prototype-predictive Gaussian term.
    pub fn log_posterior_predictive(
        &self,
        z: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<f64> {
        Ok(self.objective_grads(z, labels)?.0)
    }

    /// Objective value with gradients for the embedder (w.r.t. z) and
    /// the log-concentrations.
    pub fn objective_grads(
        &self,
        z: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Array2<f64>, Vec<f64>)> {
        if self.n_classes() == 0 {
            return Err(Error::EmptyInput("no prototype classes".into()));
        }
        self.check_labels(labels)?;
        let e = self.embed_dim();
        if z.dim() != (labels.len(), e) {
            return Err(Error::shape(
                "posterior predictive",
                format!("{} labels, embeddings {:?}", labels.len(), z.dim()),
            ));
        }
        let alpha_sum: f64 = self.alpha.iter().sum();
        let vars: Vec<Vec<f64>> =
            (0..self.n_classes()).map(|j| self.predictive_variance(j)).collect();
        let mut value = 0.0;
        let mut dz = Array2::<f64>::zeros(z.raw_dim());
        let mut counts = vec![0.0f64; self.n_classes()];
        for (i, (row, &y)) in z.rows().into_iter().zip(labels).enumerate() {
            counts[y] += 1.0;
            value += self.alpha[y].ln() - alpha_sum.ln();
            value += self.log_gaussian(row, y, &vars[y]);
            for d in 0..e {
                dz[[i, d]] = -(row[d] - self.mu[[y, d]]) / vars[y][d];
            }
        }
        let n = labels.len() as f64;
        let d_log_alpha: Vec<f64> = (0..self.n_classes())
            .map(|j| counts[j] - n * self.alpha[j] / alpha_sum)
            .collect();
        Ok((value, dz, d_log_alpha))
    }

    /// Replace concentrations, preserving positivity.
    fn set_alpha_from_log(&mut self, log_alpha: &[f64]) -> Result<()> {
        if log_alpha.len() != self.n_classes() {
            return Err(Error::shape("alpha update", "length changed"));
        }
        for (a, &la) in self.alpha.iter_mut().zip(log_alpha) {
            if !la.is_finite() {
                return Err(Error::non_finite("log concentrations"));
            }
            *a = la.exp();
        }
        Ok(())
    }

    /// Class probabilities for each embedding row, normalized over the
    /// classes seen so far.
    pub fn predict(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.n_classes() == 0 {
            return Err(Error::EmptyInput("no prototype classes".into()));
        }
        let e = self.embed_dim();
        if z.ncols() != e {
            return Err(Error::shape(
                "predict",
                format!("embeddings are {} wide, state wants {e}", z.ncols()),
            ));
        }
        let alpha_sum: f64 = self.alpha.iter().sum();
        let vars: Vec<Vec<f64>> =
            (0..self.n_classes()).map(|j| self.predictive_variance(j)).collect();
        let mut log_joint = Array2::<f64>::zeros((z.nrows(), self.n_classes()));
        for (i, row) in z.rows().into_iter().enumerate() {
            for j in 0..self.n_classes() {
                log_joint[[i, j]] =
                    self.alpha[j].ln() - alpha_sum.ln() + self.log_gaussian(row, j, &vars[j]);
            }
        }
        Ok(normalize_log_rows(log_joint))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ProtoStateJson {
            embed_dim: self.embed_dim(),
            n_classes: self.n_classes(),
            alpha: floats_to_base64(&self.alpha),
            mu: floats_to_base64(self.mu.as_slice().expect("standard layout")),
            lambda: floats_to_base64(self.lambda.as_slice().expect("standard layout")),
            sigma_eps: floats_to_base64(&self.sigma_eps),
            alpha_init: self.alpha_init,
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProtoStateJson = serde_json::from_str(text)?;
        let (j, e) = (doc.n_classes, doc.embed_dim);
        let unpack = |b64: &str, len: usize, what: &str| -> Result<Vec<f64>> {
            let v = base64_to_floats(b64)?;
            if v.len() != len {
                return Err(Error::Parse(format!(
                    "{what}: {} values for {} expected",
                    v.len(),
                    len
                )));
            }
            Ok(v)
        };
        let alpha = unpack(&doc.alpha, j, "concentrations")?;
        let mu = Array2::from_shape_vec((j, e), unpack(&doc.mu, j * e, "means")?)
            .expect("length checked");
        let lambda = Array2::from_shape_vec((j, e), unpack(&doc.lambda, j * e, "precisions")?)
            .expect("length checked");
        let sigma_eps = unpack(&doc.sigma_eps, e, "noise variances")?;
        Self::from_parts(alpha, mu, lambda, sigma_eps, doc.alpha_init, doc.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct ProtoStateJson {
    embed_dim: usize,
    n_classes: usize,
    alpha: String,
    mu: String,
    lambda: String,
    sigma_eps: String,
    alpha_init: f64,
    seed: u64,
}

/// Row-wise softmax of log-scores; shifting a row by a constant does
/// not change its probabilities.
pub fn normalize_log_rows(log_scores: Array2<f64>) -> Array2<f64> {
    let mut out = log_scores;
    for mut row in out.rows_mut() {
        let lse = logsumexp_slice(row.as_slice().expect("standard layout"));
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

/// Network mapping inputs to embeddings, with its flat parameters.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Embedder {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        if spec.head != Head::Embedding {
            return Err(Error::invalid("embedder needs an embedding head"));
        }
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { spec, params })
    }

    pub fn embed_dim(&self) -> usize {
        *self.spec.layers.last().expect("validated spec")
    }

    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        crate::nn::forward(&self.spec, &self.params, x)
    }
}

/// Retained points from past tasks, a fixed budget per task.
#[derive(Debug, Clone, Default)]
pub struct Coreset {
    pub budget: usize,
    pub batches: Vec<LabeledBatch>,
    /// Original row indices chosen from each task, for audit.
    pub indices: Vec<Vec<usize>>,
}

impl Coreset {
    pub fn new(budget: usize) -> Self {
        Self { budget, batches: Vec::new(), indices: Vec::new() }
    }

    /// Keep a uniform random subset of the batch (all of it if smaller
    /// than the budget).
    pub fn add_from(&mut self, batch: &LabeledBatch, seed: u64) {
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        if self.budget < batch.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(self.budget);
            idx.sort_unstable();
        }
        self.batches.push(batch.select(&idx));
        self.indices.push(idx);
    }

    pub fn total_len(&self) -> usize {
        self.batches.iter().map(LabeledBatch::len).sum()
    }

    pub fn pooled(&self) -> Result<Option<LabeledBatch>> {
        if self.batches.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&LabeledBatch> = self.batches.iter().collect();
        Ok(Some(LabeledBatch::concat(&refs)?))
    }

    pub fn indices_csv(&self) -> String {
        let mut out = String::from("task,row_index\n");
        for (t, rows) in self.indices.iter().enumerate() {
            for &r in rows {
                writeln!(out, "{},{r}", t + 1).expect("writing to a String cannot fail");
            }
        }
        out
    }

    pub fn write_indices_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.indices_csv())?;
        Ok(())
    }
}

fn class_labels(batch: &LabeledBatch) -> Result<&[usize]> {
    match &batch.y {
        Labels::Classes(v) => Ok(v),
        _ => Err(Error::invalid("prototype training needs class labels")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-point objective after each epoch.
    pub objective_trace: Vec<f64>,
    /// Labeled points processed across all epochs and batches.
    pub n_processed: usize,
}

/// One task of the training loop: batch-wise embedder ascent on the
/// posterior predictive, conjugate updates after every step, then a
/// random subset of the task joins the coreset.
pub fn train_task(
    embedder: &mut Embedder,
    state: &mut ProtoState,
    train: &LabeledBatch,
    coreset: &mut Coreset,
    cfg: &ProtoConfig,
    task_seed: u64,
) -> Result<TrainReport> {
    if embedder.embed_dim() != state.embed_dim() {
        return Err(Error::shape(
            "prototype training",
            format!(
                "embedder is {} wide, state wants {}",
                embedder.embed_dim(),
                state.embed_dim()
            ),
        ));
    }
    let pooled = match coreset.pooled()? {
        Some(m) => LabeledBatch::concat(&[train, &m])?,
        None => train.clone(),
    };
    let labels_all = class_labels(&pooled)?.to_vec();
    if let Some(&max) = labels_all.iter().max() {
        state.ensure_classes(max);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> =
        idx.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect();
    struct Prepared {
        graph: crate::nn::MlpGraph,
        labels: Vec<usize>,
    }
    let prepared: Vec<Prepared> = chunks
        .iter()
        .map(|c| {
            let b = pooled.select(c);
            Ok(Prepared {
                graph: build_forward_graph(&embedder.spec, b.x.clone())?,
                labels: class_labels(&b)?.to_vec(),
            })
        })
        .collect::<Result<_>>()?;

    let mut w_opt = Adam::new(cfg.lr, embedder.params.len());
    let mut a_opt = Adam::new(cfg.lr, state.n_classes());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut n_processed = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_value = 0.0;
        for &ci in &order {
            let p = &prepared[ci];
            let fwd = p.graph.graph.forward(&embedder.params)?;
            let z = fwd.value(p.graph.output);
            let (value, dz, d_log_alpha) = state.objective_grads(z.view(), &p.labels)?;
            epoch_value += value;
            let grad_w = fwd.backward_seeded(p.graph.output, dz.view())?;
            w_opt.step(&mut embedder.params, &grad_w);
            if cfg.learn_alpha {
                let mut log_alpha: Vec<f64> =
                    state.alpha.iter().map(|a| a.ln()).collect();
                a_opt.step(&mut log_alpha, &d_log_alpha);
                state.set_alpha_from_log(&log_alpha)?;
            }
            // Conjugate updates see the embeddings of the just-updated
            // network.
            let fwd = p.graph.graph.forward(&embedder.params)?;
            let z = fwd.value(p.graph.output);
            state.update_dirichlet(&p.labels)?;
            state.update_prototypes(z.view(), &p.labels)?;
            n_processed += p.labels.len();
        }
        trace.push(epoch_value / pooled.len() as f64);
    }

    coreset.add_from(train, task_seed ^ 0x636f_7265);
    Ok(TrainReport { objective_trace: trace, n_processed })
}

/// Classify a batch with the current embedder and prototypes.
pub fn evaluate(embedder: &Embedder, state: &ProtoState, batch: &LabeledBatch) -> Result<f64> {
    let z = embedder.embed(&batch.x)?;
    let probs = state.predict(z.view())?;
    accuracy(&argmax_rows(&probs), class_labels(batch)?)
}

#[derive(Debug)]
pub struct ProtoRunOutcome {
    pub accuracy: AccuracyMatrix,
    pub embedder: Embedder,
    pub state: ProtoState,
    pub coreset: Coreset,
    pub reports: Vec<TrainReport>,
}

/// Run the full loop over a class-incremental stream.
pub fn run_stream(
    embed_spec: &MlpSpec,
    stream: &TaskStream,
    cfg: &ProtoConfig,
) -> Result<ProtoRunOutcome> {
    if stream.is_empty() {
        return Err(Error::EmptyInput("empty task stream".into()));
    }
    if *embed_spec.layers.last().expect("validated spec") != cfg.embed_dim {
        return Err(Error::shape(
            "prototype run",
            format!(
                "embedder output {} but config says {}",
                embed_spec.layers.last().expect("validated spec"),
                cfg.embed_dim
            ),
        ));
    }
    let mut embedder = Embedder::new(embed_spec.clone(), cfg.seed)?;
    let mut state = ProtoState::new(cfg.embed_dim, cfg.sigma_eps, cfg.alpha_init, cfg.seed)?;
    let mut coreset = Coreset::new(cfg.coreset_per_task);
    let mut matrix = AccuracyMatrix::new();
    let mut reports = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        let task_seed = cfg.seed.wrapping_mul(0x70_72_6f).wrapping_add(t as u64 + 1);
        reports.push(train_task(
            &mut embedder,
            &mut state,
            &task.train,
            &mut coreset,
            cfg,
            task_seed,
        )?);
        let mut row = Vec::with_capacity(t + 1);
        for seen in &stream.tasks[..=t] {
            row.push(evaluate(&embedder, &state, &seen.test)?);
        }
        matrix.push_row(row)?;
    }
    Ok(ProtoRunOutcome { accuracy: matrix, embedder, state, coreset, reports })
}
