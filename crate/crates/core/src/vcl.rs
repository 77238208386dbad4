//! Mean-field variational continual learning.
//!
//! Each task maximizes a reparameterized ELBO; the optimized posterior
//! is frozen and becomes the KL anchor for the next task. Heads can be
//! shared across tasks or kept per task over a shared trunk.

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{coreset_sample, AccuracyMatrix, TaskStream};
use crate::nn::{build_log_lik_graph, LabeledBatch, MlpSpec};
use crate::opt::Adam;
use crate::seqbayes::predictive_accuracy;
use crate::{Error, Result};

/// Diagonal Gaussian over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl MeanField {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(Error::shape(
                "mean-field posterior",
                format!("{} means, {} log-stds", mu.len(), log_sigma.len()),
            ));
        }
        if mu.iter().chain(&log_sigma).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mean-field parameters"));
        }
        Ok(Self { mu, log_sigma })
    }

    /// N(0, variance I).
    pub fn standard_prior(n: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid("prior variance must be positive"));
        }
        Self::new(vec![0.0; n], vec![0.5 * variance.ln(); n])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Reparameterized draws, one weight vector per row.
    pub fn sample_matrix<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let p = self.len();
        Array2::from_shape_fn((n, p), |(_, j)| {
            self.mu[j] + self.log_sigma[j].exp() * rng.sample::<f64, _>(StandardNormal)
        })
    }
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(q: &MeanField, p: &MeanField) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(
            "diagonal KL",
            format!("q has {} dims, p has {}", q.len(), p.len()),
        ));
    }
    let mut kl = 0.0;
    for i in 0..q.len() {
        let (mq, lq) = (q.mu[i], q.log_sigma[i]);
        let (mp, lp) = (p.mu[i], p.log_sigma[i]);
        let var_ratio = (2.0 * (lq - lp)).exp();
        let mean_term = (mq - mp).powi(2) / (2.0 * lp).exp();
        kl += lp - lq + 0.5 * (var_ratio + mean_term - 1.0);
    }
    Ok(kl)
}

struct ElboGrad {
    value: f64,
    d_mu: Vec<f64>,
    d_log_sigma: Vec<f64>,
}

/// ELBO and its exact gradient for a fixed noise matrix (one MC draw
/// per row). `scale` lifts the minibatch likelihood to dataset size.
fn elbo_with_eps(
    f: &crate::autodiff::GraphFn,
    q: &MeanField,
    prior: &MeanField,
    eps: ArrayView2<f64>,
    scale: f64,
) -> Result<ElboGrad> {
    let p = q.len();
    if eps.ncols() != p {
        return Err(Error::shape(
            "elbo noise",
            format!("{} columns for {} parameters", eps.ncols(), p),
        ));
    }
    let s = eps.nrows();
    let mut mean_ll = 0.0;
    let mut d_mu = vec![0.0; p];
    let mut d_ls = vec![0.0; p];
    let mut w = vec![0.0; p];
    for row in eps.rows() {
        for j in 0..p {
            w[j] = q.mu[j] + q.log_sigma[j].exp() * row[j];
        }
        let (ll, g) = f.graph.eval_with_grad(f.output, &w)?;
        mean_ll += ll;
        for j in 0..p {
            d_mu[j] += g[j];
            d_ls[j] += g[j] * row[j] * q.log_sigma[j].exp();
        }
    }
    let inv = scale / s as f64;
    mean_ll *= inv / scale;
    for j in 0..p {
        d_mu[j] *= inv;
        d_ls[j] *= inv;
    }
    let kl = kl_diag_gaussian(q, prior)?;
    for j in 0..p {
        let var_ratio = (2.0 * (q.log_sigma[j] - prior.log_sigma[j])).exp();
        let prior_var = (2.0 * prior.log_sigma[j]).exp();
        d_mu[j] -= (q.mu[j] - prior.mu[j]) / prior_var;
        d_ls[j] -= var_ratio - 1.0;
    }
    Ok(ElboGrad {
        value: scale * mean_ll - kl,
        d_mu,
        d_log_sigma: d_ls,
    })
}

/// Reparameterized ELBO estimate: the expected log-likelihood scaled to
/// `dataset_size` observations, minus the KL to the prior. `None` for
/// the batch means no likelihood term at all.
pub fn elbo(
    q: &MeanField,
    prior: &MeanField,
    spec: &MlpSpec,
    batch: Option<&LabeledBatch>,
    n_mc: usize,
    dataset_size: usize,
    seed: u64,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::invalid("elbo needs at least one MC draw"));
    }
    if q.len() != spec.n_params() {
        return Err(Error::shape(
            "elbo",
            format!("{} posterior dims for {} parameters", q.len(), spec.n_params()),
        ));
    }
    let kl = kl_diag_gaussian(q, prior)?;
    let Some(batch) = batch else {
        return Ok(-kl);
    };
    let f = build_log_lik_graph(spec, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array2::from_shape_fn((n_mc, q.len()), |_| rng.sample::<f64, _>(StandardNormal));
    let scale = dataset_size as f64 / batch.len() as f64;
    let g = elbo_with_eps(&f, q, prior, eps.view(), scale)?;
    Ok(g.value)
}

/// ELBO plus its pathwise gradient `(value, d_mu, d_log_sigma)` under
/// the same fixed noise `elbo` draws for this seed, so finite
/// differences of `elbo` at the seed must agree with these gradients.
pub fn elbo_and_grad(
    q: &MeanField,
    prior: &MeanField,
    spec: &MlpSpec,
    batch: &LabeledBatch,
    n_mc: usize,
    dataset_size: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if n_mc == 0 {
        return Err(Error::invalid("elbo needs at least one MC draw"));
    }
    if q.len() != spec.n_params() {
        return Err(Error::shape(
            "elbo",
            format!("{} posterior dims for {} parameters", q.len(), spec.n_params()),
        ));
    }
    let f = build_log_lik_graph(spec, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array2::from_shape_fn((n_mc, q.len()), |_| rng.sample::<f64, _>(StandardNormal));
    let scale = dataset_size as f64 / batch.len() as f64;
    let g = elbo_with_eps(&f, q, prior, eps.view(), scale)?;
    Ok((g.value, g.d_mu, g.d_log_sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// One output block shared by every task.
    Single,
    /// A private output block per task over the shared trunk; needs the
    /// task identity at evaluation time.
    Multi,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VclConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    /// Initial log-std for fresh variational parameters.
    pub init_log_sigma: f64,
    /// Variance of the N(0, vI) prior used before any task.
    pub prior_variance: f64,
    /// When set, keep this many points per task and fine-tune a copy on
    /// the pooled keepsakes before each evaluation.
    pub coreset_size: Option<usize>,
    pub coreset_epochs: usize,
    pub seed: u64,
}

impl Default for VclConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            n_mc_train: 10,
            n_mc_eval: 100,
            init_log_sigma: -3.0,
            prior_variance: 1.0,
            coreset_size: None,
            coreset_epochs: 20,
            seed: 0,
        }
    }
}

/// Trained continual learner: a trunk plus one head (shared) or one
/// head per task.
#[derive(Debug, Clone)]
pub struct VclModel {
    pub spec: MlpSpec,
    pub mode: HeadMode,
    pub trunk: MeanField,
    pub heads: Vec<MeanField>,
    trunk_len: usize,
    head_len: usize,
}

impl VclModel {
    pub fn new(spec: MlpSpec, mode: HeadMode, cfg: &VclConfig) -> Result<Self> {
        let widths = &spec.layers;
        if widths.len() < 2 {
            return Err(Error::invalid("network needs an output layer"));
        }
        let head_len = widths[widths.len() - 2] * widths[widths.len() - 1]
            + widths[widths.len() - 1];
        let trunk_len = spec.n_params() - head_len;
        let init = spec.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let trunk = MeanField::new(
            init[..trunk_len].to_vec(),
            vec![cfg.init_log_sigma; trunk_len],
        )?;
        let heads = match mode {
            HeadMode::Single => vec![MeanField::new(
                init[trunk_len..].to_vec(),
                vec![cfg.init_log_sigma; head_len],
            )?],
            HeadMode::Multi => Vec::new(),
        };
        Ok(Self { spec, mode, trunk, heads, trunk_len, head_len })
    }

    fn head_index(&self, task: usize) -> usize {
        match self.mode {
            HeadMode::Single => 0,
            HeadMode::Multi => task,
        }
    }

    /// Full posterior over [trunk, head-for-task].
    fn assemble(&self, task: usize) -> Result<MeanField> {
        let head = self
            .heads
            .get(self.head_index(task))
            .ok_or_else(|| Error::invalid(format!("no head trained for task {task}")))?;
        let mut mu = self.trunk.mu.clone();
        mu.extend_from_slice(&head.mu);
        let mut ls = self.trunk.log_sigma.clone();
        ls.extend_from_slice(&head.log_sigma);
        MeanField::new(mu, ls)
    }

    fn store(&mut self, task: usize, q: &MeanField) {
        let idx = self.head_index(task);
        self.trunk.mu.copy_from_slice(&q.mu[..self.trunk_len]);
        self.trunk.log_sigma.copy_from_slice(&q.log_sigma[..self.trunk_len]);
        let head = &mut self.heads[idx];
        head.mu.copy_from_slice(&q.mu[self.trunk_len..]);
        head.log_sigma.copy_from_slice(&q.log_sigma[self.trunk_len..]);
    }

    /// Posterior draws for evaluating `task`, one weight vector per row.
    pub fn sample_for_task<R: Rng>(
        &self,
        task: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        Ok(self.assemble(task)?.sample_matrix(n, rng))
    }
}

fn chunk_indices(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One task's ELBO ascent, starting from `q0` against a frozen prior.
fn optimize_task(
    spec: &MlpSpec,
    batch: &LabeledBatch,
    q0: &MeanField,
    prior: &MeanField,
    cfg: &VclConfig,
    epochs: usize,
    seed: u64,
) -> Result<MeanField> {
    let p = q0.len();
    let mut q = q0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks = chunk_indices(batch.len(), cfg.batch_size, &mut rng);
    let graphs: Vec<(usize, crate::autodiff::GraphFn)> = chunks
        .iter()
        .map(|c| Ok((c.len(), build_log_lik_graph(spec, &batch.select(c))?)))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut opt = Adam::new(cfg.lr, 2 * p);
    let mut flat = vec![0.0; 2 * p];
    let mut grad = vec![0.0; 2 * p];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &gi in &order {
            let (chunk_len, f) = &graphs[gi];
            let eps = Array2::from_shape_fn((cfg.n_mc_train, p), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let scale = batch.len() as f64 / *chunk_len as f64;
            let g = elbo_with_eps(f, &q, prior, eps.view(), scale)?;
            flat[..p].copy_from_slice(&q.mu);
            flat[p..].copy_from_slice(&q.log_sigma);
            grad[..p].copy_from_slice(&g.d_mu);
            grad[p..].copy_from_slice(&g.d_log_sigma);
            opt.step(&mut flat, &grad);
            q.mu.copy_from_slice(&flat[..p]);
            q.log_sigma.copy_from_slice(&flat[p..]);
        }
    }
    Ok(q)
}

#[derive(Debug)]
pub struct VclOutcome {
    pub accuracy: AccuracyMatrix,
    /// Full-batch ELBO of each task's posterior right after training it.
    pub final_elbo: Vec<f64>,
    pub model: VclModel,
}

/// Train through the stream, evaluating all seen tasks after each one.
pub fn train_stream(
    spec: &MlpSpec,
    stream: &TaskStream,
    mode: HeadMode,
    cfg: &VclConfig,
) -> Result<VclOutcome> {
    if stream.is_empty() {
        return Err(Error::EmptyInput("empty task stream".into()));
    }
    if cfg.coreset_size.is_some() && mode == HeadMode::Multi {
        return Err(Error::invalid(
            "coreset fine-tuning is only defined for the shared-head variant",
        ));
    }
    let mut model = VclModel::new(spec.clone(), mode, cfg)?;
    let trunk_len = model.trunk_len;
    let mut accuracy = AccuracyMatrix::new();
    let mut final_elbo = Vec::new();
    let mut coresets: Vec<LabeledBatch> = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        let task_seed = cfg.seed.wrapping_mul(0x00c0_ffee).wrapping_add(t as u64 + 1);
        if mode == HeadMode::Multi {
            // Fresh head: its prior is the initial one, its start point a
            // fresh init so symmetry is broken.
            let init =
                spec.init_params(&mut ChaCha8Rng::seed_from_u64(task_seed ^ 0x6865_6164));
            model.heads.push(MeanField::new(
                init[trunk_len..].to_vec(),
                vec![cfg.init_log_sigma; model.head_len],
            )?);
        }
        let q0 = model.assemble(t)?;
        // Before any task the anchor is the initial N(0, vI); afterwards
        // the trunk (and shared head) anchor to the frozen previous
        // posterior. Fresh heads always anchor to the initial prior.
        let prior = {
            let mut p = MeanField::standard_prior(q0.len(), cfg.prior_variance)?;
            if t > 0 {
                p.mu[..trunk_len].copy_from_slice(&model.trunk.mu);
                p.log_sigma[..trunk_len].copy_from_slice(&model.trunk.log_sigma);
                if mode == HeadMode::Single {
                    p.mu[trunk_len..].copy_from_slice(&model.heads[0].mu);
                    p.log_sigma[trunk_len..].copy_from_slice(&model.heads[0].log_sigma);
                }
            }
            p
        };
        let q = optimize_task(spec, &task.train, &q0, &prior, cfg, cfg.epochs, task_seed)?;
        model.store(t, &q);
        final_elbo.push(elbo(
            &q,
            &prior,
            spec,
            Some(&task.train),
            32,
            task.train.len(),
            task_seed ^ 0x7472,
        )?);

        if let Some(k) = cfg.coreset_size {
            coresets.push(coreset_sample(&task.train, k, task_seed ^ 0x636f_7265));
        }

        // Evaluation model: either the live one, or a copy fine-tuned on
        // the pooled coresets against the current posterior.
        let eval_model = if cfg.coreset_size.is_some() {
            let refs: Vec<&LabeledBatch> = coresets.iter().collect();
            let pooled = LabeledBatch::concat(&refs)?;
            let anchor = model.assemble(t)?;
            let tuned = optimize_task(
                spec,
                &pooled,
                &anchor,
                &anchor,
                cfg,
                cfg.coreset_epochs,
                task_seed ^ 0x7475_6e65,
            )?;
            let mut m = model.clone();
            m.store(t, &tuned);
            m
        } else {
            model.clone()
        };

        let mut row = Vec::with_capacity(t + 1);
        for (j, seen) in stream.tasks[..=t].iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(task_seed ^ 0x6576_616c ^ ((j as u64) << 32));
            let draws = eval_model.sample_for_task(j, cfg.n_mc_eval, &mut rng)?;
            row.push(predictive_accuracy(spec, draws.view(), &seen.test, cfg.n_mc_eval)?);
        }
        accuracy.push_row(row)?;
    }

    Ok(VclOutcome { accuracy, final_elbo, model })
}
