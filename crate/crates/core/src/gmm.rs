//! Full-covariance Gaussian mixtures fitted by EM.
//!
//! This is the density-refit stage between tasks: pooled posterior draws
//! go in, a differentiable log density comes out and becomes the next
//! prior. Covariances are kept as lower Cholesky factors throughout; the
//! E-step whitens the whole sample block with one matmul per component.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp_slice;
use crate::density::LogDensity;
use crate::linalg;
use crate::{Error, Result};

/// Weight below which a component is dropped during EM.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub n_restarts: usize,
    /// Diagonal jitter added to every covariance in the M-step.
    pub reg: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_components: 1,
            max_iter: 200,
            tol: 1e-6,
            n_restarts: 5,
            reg: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmReport {
    /// Mean held-in log-likelihood after each iteration of the winning
    /// restart; non-decreasing up to float noise.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub n_pruned: usize,
    pub warnings: Vec<String>,
}

/// Mixture of full-covariance Gaussians; covariance stored as its lower
/// Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    /// (K, D)
    means: Array2<f64>,
    /// Lower factors, one (D, D) per component.
    chols: Vec<Array2<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, chols: Vec<Array2<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::EmptyInput("mixture with no components".into()));
        }
        if means.nrows() != k || chols.len() != k {
            return Err(Error::shape(
                "mixture",
                format!("{k} weights, {} means, {} factors", means.nrows(), chols.len()),
            ));
        }
        let d = means.ncols();
        let wsum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive and finite"));
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {wsum}, not 1")));
        }
        for (ki, l) in chols.iter().enumerate() {
            if l.nrows() != d || l.ncols() != d {
                return Err(Error::shape(
                    "mixture",
                    format!("component {ki} factor is {}x{}, dim is {d}", l.nrows(), l.ncols()),
                ));
            }
            for i in 0..d {
                if !(l[[i, i]] > 0.0) {
                    return Err(Error::invalid(format!(
                        "component {ki} factor has non-positive diagonal at {i}"
                    )));
                }
                for j in (i + 1)..d {
                    if l[[i, j]] != 0.0 {
                        return Err(Error::invalid(format!(
                            "component {ki} factor is not lower-triangular"
                        )));
                    }
                }
            }
        }
        if !means.iter().all(|v| v.is_finite())
            || chols.iter().any(|l| !l.iter().all(|v| v.is_finite()))
        {
            return Err(Error::non_finite("mixture parameters"));
        }
        Ok(Self { weights, means, chols })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn cholesky_factor(&self, k: usize) -> ArrayView2<'_, f64> {
        self.chols[k].view()
    }

    /// Per-component log w_k + log N(x; m_k, C_k).
    fn component_log_terms(&self, x: ArrayView1<f64>) -> Vec<f64> {
        (0..self.n_components())
            .map(|k| {
                self.weights[k].ln()
                    + linalg::mvn_log_density(x, self.means.row(k), self.chols[k].view())
            })
            .collect()
    }

    /// Ancestral sampling: pick a component, then draw from it.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.means.ncols();
        let mut out = Array2::zeros((n, d));
        let mut z = Array1::zeros(d);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.n_components() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let shift = self.chols[k].dot(&z);
            out.row_mut(i).assign(&(&self.means.row(k) + &shift));
        }
        out
    }

    /// Ancestral draws pulled toward their component mean by
    /// `shrink` ∈ (0, 1]: `mean + shrink * (draw - mean)`. `shrink = 1`
    /// is plain sampling.
    pub fn sample_shrunk<R: Rng>(&self, n: usize, shrink: f64, rng: &mut R) -> Array2<f64> {
        let mut out = self.sample(n, rng);
        if shrink == 1.0 {
            return out;
        }
        // Rows keep their sampled component because the pull is applied
        // against the nearest-responsibility mean of the drawn point.
        for mut row in out.rows_mut() {
            let terms = self.component_log_terms(row.view());
            let k = terms
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mean = self.means.row(k);
            for (x, &m) in row.iter_mut().zip(mean.iter()) {
                *x = m + shrink * (*x - m);
            }
        }
        out
    }

    /// Mean log density over rows.
    pub fn mean_log_density(&self, xs: ArrayView2<f64>) -> f64 {
        let n = xs.nrows().max(1) as f64;
        xs.rows()
            .into_iter()
            .map(|r| {
                let terms = self.component_log_terms(r);
                logsumexp_slice(&terms)
            })
            .sum::<f64>()
            / n
    }
}

impl LogDensity for GaussianMixture {
    fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let terms = self.component_log_terms(ArrayView1::from(x));
        logsumexp_slice(&terms)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let xv = ArrayView1::from(x);
        let terms = self.component_log_terms(xv);
        let total = logsumexp_slice(&terms);
        let mut grad = Array1::<f64>::zeros(x.len());
        for k in 0..self.n_components() {
            let resp = (terms[k] - total).exp();
            if resp == 0.0 {
                continue;
            }
            let diff = &xv - &self.means.row(k);
            let pull = linalg::solve_spd(self.chols[k].view(), diff.view());
            grad.scaled_add(-resp, &pull);
        }
        grad.to_vec()
    }
}

struct FitState {
    weights: Vec<f64>,
    means: Array2<f64>,
    chols: Vec<Array2<f64>>,
    n_pruned: usize,
    warnings: Vec<String>,
}

/// Fit a mixture by EM with random-responsibility restarts, keeping the
/// restart with the best held-in mean log-likelihood.
pub fn fit_em(samples: ArrayView2<f64>, cfg: &EmConfig) -> Result<(GaussianMixture, EmReport)> {
    if samples.nrows() == 0 {
        return Err(Error::EmptyInput("EM on zero samples".into()));
    }
    if cfg.n_components == 0 || cfg.n_restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::invalid("EM needs components, restarts, and iterations"));
    }
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("EM input samples"));
    }
    let mut best: Option<(f64, GaussianMixture, EmReport)> = None;
    for restart in 0..cfg.n_restarts {
        let seed = cfg.seed.wrapping_add(restart as u64);
        let (mix, report) = em_single(samples, cfg, seed)?;
        let score = *report
            .log_likelihood_trace
            .last()
            .expect("EM always records at least one iteration");
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, mix, report));
        }
    }
    let (_, mix, report) = best.expect("at least one restart ran");
    Ok((mix, report))
}

fn em_single(
    samples: ArrayView2<f64>,
    cfg: &EmConfig,
    seed: u64,
) -> Result<(GaussianMixture, EmReport)> {
    let n = samples.nrows();
    let d = samples.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seed responsibilities from randomly chosen anchor rows: each row
    // leans toward its nearest anchor. Random per-row responsibilities
    // would start every mean at the global centroid, which reliably
    // traps EM in component-bridging optima when the samples form
    // well-separated clusters.
    let mut resp = Array2::from_elem((n, cfg.n_components), 1e-3);
    let k_eff = cfg.n_components.min(n);
    let anchors = rand::seq::index::sample(&mut rng, n, k_eff);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (slot, a) in anchors.iter().enumerate() {
            let mut dist = 0.0;
            for j in 0..d {
                let diff = samples[[i, j]] - samples[[a, j]];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = slot;
            }
        }
        resp[[i, best]] += 1.0;
    }
    for mut row in resp.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }

    let mut state = FitState {
        weights: vec![1.0 / cfg.n_components as f64; cfg.n_components],
        means: Array2::zeros((cfg.n_components, d)),
        chols: Vec::new(),
        n_pruned: 0,
        warnings: Vec::new(),
    };
    m_step(samples, &resp, cfg.reg, &mut state)?;

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let ll = e_step(samples, &state, &mut resp);
        if !ll.is_finite() {
            return Err(Error::non_finite("EM mean log-likelihood"));
        }
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            if (ll - prev).abs() < cfg.tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        m_step(samples, &resp, cfg.reg, &mut state)?;
        if state.weights.len() < resp.ncols() {
            // A component was pruned; rebuild the responsibility buffer.
            resp = Array2::zeros((n, state.weights.len()));
        }
    }

    let mix = GaussianMixture::new(state.weights, state.means, state.chols)?;
    Ok((
        mix,
        EmReport {
            log_likelihood_trace: trace,
            converged,
            n_pruned: state.n_pruned,
            warnings: state.warnings,
        },
    ))
}

/// Fill `resp` and return the mean log-likelihood under the current state.
fn e_step(samples: ArrayView2<f64>, state: &FitState, resp: &mut Array2<f64>) -> f64 {
    let n = samples.nrows();
    let d = samples.ncols();
    let k = state.weights.len();
    // log w_k + log N per point per component.
    let mut logp = Array2::zeros((n, k));
    for ki in 0..k {
        let linv = linalg::invert_lower(state.chols[ki].view());
        let logdet = linalg::log_det_from_cholesky(state.chols[ki].view());
        let norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet)
            + state.weights[ki].ln();
        let centered = &samples - &state.means.row(ki);
        let white = centered.dot(&linv.t());
        for i in 0..n {
            let maha: f64 = white.row(i).iter().map(|v| v * v).sum();
            logp[[i, ki]] = norm - 0.5 * maha;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = logp.row(i);
        let lse = logsumexp_slice(row.as_slice().expect("row-major"));
        total += lse;
        for ki in 0..k {
            resp[[i, ki]] = (logp[[i, ki]] - lse).exp();
        }
    }
    total / n as f64
}

/// Refit weights, means, covariances from responsibilities; prunes
/// components whose weight collapses or whose covariance cannot be
/// factored even with the jitter in place.
fn m_step(
    samples: ArrayView2<f64>,
    resp: &Array2<f64>,
    reg: f64,
    state: &mut FitState,
) -> Result<()> {
    let n = samples.nrows();
    let d = samples.ncols();
    let k = resp.ncols();
    let nk = resp.sum_axis(Axis(0));

    let mut weights = Vec::with_capacity(k);
    let mut means = Array2::zeros((k, d));
    let mut chols = Vec::with_capacity(k);
    let mut keep = Vec::with_capacity(k);

    for ki in 0..k {
        let w = nk[ki] / n as f64;
        if w < COLLAPSE_WEIGHT {
            state.n_pruned += 1;
            state
                .warnings
                .push(format!("component {ki} collapsed (weight {w:.3e}), pruned"));
            continue;
        }
        let nk_safe = nk[ki].max(1e-32);
        let r = resp.column(ki);
        let mean = samples.t().dot(&r) / nk_safe;
        // sqrt-weighted centering keeps the product symmetric PSD.
        let mut centered = &samples - &mean.view().insert_axis(Axis(0));
        for (mut row, &ri) in centered.rows_mut().into_iter().zip(r.iter()) {
            let s = ri.max(0.0).sqrt();
            row.mapv_inplace(|v| v * s);
        }
        let mut cov = centered.t().dot(&centered) / nk_safe;
        for i in 0..d {
            cov[[i, i]] += reg;
        }
        match linalg::cholesky(cov.view()) {
            Ok(l) => {
                keep.push(ki);
                weights.push(w);
                means.row_mut(chols.len()).assign(&mean);
                chols.push(l);
            }
            Err(_) => {
                state.n_pruned += 1;
                state
                    .warnings
                    .push(format!("component {ki} covariance not PD after jitter, pruned"));
            }
        }
    }

    if weights.is_empty() {
        return Err(Error::invalid("every mixture component collapsed"));
    }
    let wsum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= wsum;
    }
    let kept = weights.len();
    state.weights = weights;
    state.means = means.slice_move(ndarray::s![..kept, ..]);
    state.chols = chols;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub k_grid: Vec<usize>,
    pub holdout_frac: f64,
    pub em: EmConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 2, 3, 5, 8, 10],
            holdout_frac: 0.2,
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    /// (K, holdout mean log-likelihood) per candidate, in grid order.
    pub candidates: Vec<(usize, f64)>,
    pub chosen_k: usize,
    pub refit: EmReport,
}

/// Pick the component count by held-out log-likelihood, then refit the
/// winner on all samples.
pub fn select_components(
    samples: ArrayView2<f64>,
    cfg: &SelectionConfig,
) -> Result<(GaussianMixture, SelectionReport)> {
    let n = samples.nrows();
    if cfg.k_grid.is_empty() {
        return Err(Error::EmptyInput("empty component grid".into()));
    }
    if !(cfg.holdout_frac > 0.0 && cfg.holdout_frac < 1.0) {
        return Err(Error::invalid("holdout fraction must be in (0, 1)"));
    }
    let n_holdout = ((n as f64) * cfg.holdout_frac).round() as usize;
    if n_holdout == 0 || n_holdout >= n {
        return Err(Error::invalid(format!(
            "cannot hold out {n_holdout} of {n} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.em.seed ^ 0x686f_6c64_6f75_74);
    idx.shuffle(&mut rng);
    let (hold_idx, train_idx) = idx.split_at(n_holdout);
    let train = samples.select(Axis(0), train_idx);
    let hold = samples.select(Axis(0), hold_idx);

    let mut candidates = Vec::with_capacity(cfg.k_grid.len());
    let mut best: Option<(f64, usize)> = None;
    for &k in &cfg.k_grid {
        let mut em = cfg.em.clone();
        em.n_components = k;
        let (mix, _) = fit_em(train.view(), &em)?;
        let score = mix.mean_log_density(hold.view());
        candidates.push((k, score));
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, k));
        }
    }
    let (_, chosen_k) = best.expect("grid checked non-empty");

    let mut em = cfg.em.clone();
    em.n_components = chosen_k;
    let (mix, refit) = fit_em(samples, &em)?;
    Ok((mix, SelectionReport { candidates, chosen_k, refit }))
}

/// JSON form: shapes in the clear, numbers as base64 little-endian f64.
#[derive(Debug, Serialize, Deserialize)]
struct MixtureJson {
    dim: usize,
    n_components: usize,
    weights: String,
    /// Row-major (K, D).
    means: String,
    /// Row-major (D, D) lower factors, one per component.
    cholesky_factors: Vec<String>,
}

impl GaussianMixture {
    pub fn to_json(&self) -> Result<String> {
        let d = self.means.ncols();
        let doc = MixtureJson {
            dim: d,
            n_components: self.n_components(),
            weights: crate::io::floats_to_base64(&self.weights),
            means: crate::io::floats_to_base64(self.means.as_slice().expect("row-major")),
            cholesky_factors: self
                .chols
                .iter()
                .map(|l| crate::io::floats_to_base64(l.as_slice().expect("row-major")))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MixtureJson = serde_json::from_str(text)?;
        let weights = crate::io::base64_to_floats(&doc.weights)?;
        if weights.len() != doc.n_components {
            return Err(Error::Parse(format!(
                "{} weights for {} components",
                weights.len(),
                doc.n_components
            )));
        }
        let means_flat = crate::io::base64_to_floats(&doc.means)?;
        let means = Array2::from_shape_vec((doc.n_components, doc.dim), means_flat)
            .map_err(|e| Error::Parse(format!("means: {e}")))?;
        if doc.cholesky_factors.len() != doc.n_components {
            return Err(Error::Parse(format!(
                "{} factors for {} components",
                doc.cholesky_factors.len(),
                doc.n_components
            )));
        }
        let mut chols = Vec::with_capacity(doc.n_components);
        for s in &doc.cholesky_factors {
            let flat = crate::io::base64_to_floats(s)?;
            let l = Array2::from_shape_vec((doc.dim, doc.dim), flat)
                .map_err(|e| Error::Parse(format!("factor: {e}")))?;
            chols.push(l);
        }
        GaussianMixture::new(weights, means, chols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::density::DensityFn;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_blob_mixture() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.35, 0.65],
            array![[-3.0, 0.0], [3.0, 1.0]],
            vec![
                array![[1.0, 0.0], [0.3, 0.8]],
                array![[0.6, 0.0], [-0.2, 1.1]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_component_matches_plain_gaussian() {
        let l = array![[1.2, 0.0], [0.4, 0.9]];
        let mix = GaussianMixture::new(vec![1.0], array![[0.5, -0.5]], vec![l.clone()]).unwrap();
        let x = [0.2, 0.7];
        let want = linalg::mvn_log_density(
            ArrayView1::from(&x[..]),
            array![0.5, -0.5].view(),
            l.view(),
        );
        assert_abs_diff_eq!(mix.log_density(&x), want, epsilon = 1e-14);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let mix = two_blob_mixture();
        let h = 0.05;
        let mut total = 0.0;
        let mut x = -12.0;
        while x < 12.0 {
            let mut y = -10.0;
            while y < 12.0 {
                total += mix.log_density(&[x, y]).exp();
                y += h;
            }
            x += h;
        }
        total *= h * h;
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn gradient_passes_central_difference_check() {
        let mix = two_blob_mixture();
        for &x in &[[0.0, 0.0], [-3.1, 0.2], [2.5, 0.8], [6.0, -4.0]] {
            let err = check_gradient(&DensityFn(&mix), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "at {x:?}: rel err {err:e}");
        }
    }

    #[test]
    fn em_recovers_generator_components() {
        let truth = two_blob_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let data = truth.sample(4000, &mut rng);
        let cfg = EmConfig { n_components: 2, seed: 9, ..EmConfig::default() };
        let (fit, report) = fit_em(data.view(), &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(fit.n_components(), 2);

        // Components come back in arbitrary order; match by x-sign.
        let (lo, hi) = if fit.means()[[0, 0]] < fit.means()[[1, 0]] { (0, 1) } else { (1, 0) };
        assert_abs_diff_eq!(fit.weights()[lo], 0.35, epsilon = 0.05);
        assert_abs_diff_eq!(fit.weights()[hi], 0.65, epsilon = 0.05);
        assert_abs_diff_eq!(fit.means()[[lo, 0]], -3.0, epsilon = 0.1);
        assert_abs_diff_eq!(fit.means()[[lo, 1]], 0.0, epsilon = 0.1);
        assert_abs_diff_eq!(fit.means()[[hi, 0]], 3.0, epsilon = 0.1);
        assert_abs_diff_eq!(fit.means()[[hi, 1]], 1.0, epsilon = 0.1);
    }

    #[test]
    fn em_trace_is_monotone() {
        let truth = two_blob_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data = truth.sample(600, &mut rng);
        for k in [1, 2, 4] {
            let cfg = EmConfig { n_components: k, n_restarts: 2, seed: 5, ..EmConfig::default() };
            let (_, report) = fit_em(data.view(), &cfg).unwrap();
            for w in report.log_likelihood_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "LL dropped {} -> {} (k={k})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn selection_finds_the_generator_component_count() {
        let truth = GaussianMixture::new(
            vec![0.3, 0.3, 0.4],
            array![[-6.0, 0.0], [0.0, 5.0], [6.0, -2.0]],
            vec![
                Array2::eye(2) * 0.8,
                Array2::eye(2) * 0.7,
                Array2::eye(2) * 0.9,
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data = truth.sample(3000, &mut rng);
        let cfg = SelectionConfig {
            k_grid: vec![1, 2, 3, 5],
            holdout_frac: 0.2,
            em: EmConfig { n_restarts: 3, seed: 100, ..EmConfig::default() },
        };
        let (mix, report) = select_components(data.view(), &cfg).unwrap();
        assert_eq!(report.chosen_k, 3, "candidates {:?}", report.candidates);
        assert_eq!(mix.n_components(), 3);
        assert_eq!(report.candidates.len(), 4);
    }

    #[test]
    fn sample_moments_match_the_mixture() {
        // Mixture mean = sum_k w_k m_k.
        let mix = two_blob_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let draws = mix.sample(20_000, &mut rng);
        let want_x = 0.35 * -3.0 + 0.65 * 3.0;
        let want_y = 0.35 * 0.0 + 0.65 * 1.0;
        let got = draws.mean_axis(Axis(0)).unwrap();
        assert_abs_diff_eq!(got[0], want_x, epsilon = 0.08);
        assert_abs_diff_eq!(got[1], want_y, epsilon = 0.05);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mix = two_blob_mixture();
        let text = mix.to_json().unwrap();
        let back = GaussianMixture::from_json(&text).unwrap();
        for &x in &[[0.1, 0.2], [-5.0, 3.0], [2.0, -2.0]] {
            assert_eq!(mix.log_density(&x).to_bits(), back.log_density(&x).to_bits());
        }
    }

    #[test]
    fn constructor_rejects_malformed_mixtures() {
        // Weights off by more than the tolerance.
        assert!(GaussianMixture::new(
            vec![0.5, 0.4],
            array![[0.0], [1.0]],
            vec![array![[1.0]], array![[1.0]]],
        )
        .is_err());
        // Upper-triangular garbage in the factor.
        assert!(GaussianMixture::new(
            vec![1.0],
            array![[0.0, 0.0]],
            vec![array![[1.0, 0.5], [0.0, 1.0]]],
        )
        .is_err());
        // Non-positive diagonal.
        assert!(GaussianMixture::new(
            vec![1.0],
            array![[0.0, 0.0]],
            vec![array![[1.0, 0.0], [0.0, -1.0]]],
        )
        .is_err());
    }

    #[test]
    fn log_density_stays_finite_far_out() {
        let mix = two_blob_mixture();
        let v = mix.log_density(&[400.0, -300.0]);
        assert!(v.is_finite() && v < -1000.0);
        let g = mix.grad(&[400.0, -300.0]);
        assert!(g.iter().all(|x| x.is_finite()));
    }
}
