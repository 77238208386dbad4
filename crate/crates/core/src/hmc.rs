//! Hamiltonian Monte Carlo with an identity mass matrix.
//!
//! Plain leapfrog + Metropolis correction, no adaptation: step size and
//! trajectory length are caller-fixed so that runs are reproducible and
//! comparable across tasks. Chains run independently (rayon) with one
//! rng per chain, so results do not depend on scheduling.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::LogDensity;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub n_burn_in: usize,
    pub n_samples: usize,
    pub n_chains: usize,
    /// Energy error above which a trajectory counts as divergent.
    pub divergence_threshold: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.001,
            n_leapfrog: 20,
            n_burn_in: 1000,
            n_samples: 10_000,
            n_chains: 20,
            divergence_threshold: 1000.0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step size {} must be positive", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::invalid("need at least one leapfrog step"));
        }
        if self.n_samples == 0 || self.n_chains == 0 {
            return Err(Error::invalid("need at least one sample and one chain"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence threshold must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension effective sample size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimEss {
    pub ess: f64,
    /// Set when the draws were (numerically) constant; `ess` is then 1.
    pub degenerate: bool,
}

/// One finished chain: kept draws plus its run diagnostics.
#[derive(Debug, Clone)]
pub struct Chain {
    /// (n_samples, dim), burn-in discarded.
    pub samples: Array2<f64>,
    pub accept_rate: f64,
    pub n_divergences: usize,
    pub ess: Vec<DimEss>,
    pub seed: u64,
}

impl Chain {
    pub fn min_ess(&self) -> f64 {
        self.ess.iter().map(|e| e.ess).fold(f64::INFINITY, f64::min)
    }

    pub fn mean_ess(&self) -> f64 {
        let n = self.ess.len().max(1) as f64;
        self.ess.iter().map(|e| e.ess).sum::<f64>() / n
    }
}

/// `n_steps` of leapfrog from (q, p); returns the proposed state.
///
/// Exposed for the reversibility checks; the sampler uses the same
/// integrator with gradient caching.
pub fn leapfrog(
    target: &dyn LogDensity,
    q: &[f64],
    p: &[f64],
    step_size: f64,
    n_steps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut grad = target.grad(&q);
    half_kick(&mut p, &grad, step_size);
    for step in 0..n_steps {
        drift(&mut q, &p, step_size);
        grad = target.grad(&q);
        if step + 1 < n_steps {
            kick(&mut p, &grad, step_size);
        }
    }
    half_kick(&mut p, &grad, step_size);
    (q, p)
}

fn half_kick(p: &mut [f64], grad: &[f64], eps: f64) {
    for (pi, gi) in p.iter_mut().zip(grad) {
        *pi += 0.5 * eps * gi;
    }
}

fn kick(p: &mut [f64], grad: &[f64], eps: f64) {
    for (pi, gi) in p.iter_mut().zip(grad) {
        *pi += eps * gi;
    }
}

fn drift(q: &mut [f64], p: &[f64], eps: f64) {
    for (qi, pi) in q.iter_mut().zip(p) {
        *qi += eps * pi;
    }
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Run one chain from `init`; deterministic in `seed`.
pub fn sample_chain(
    target: &dyn LogDensity,
    init: &[f64],
    config: &HmcConfig,
    seed: u64,
) -> Result<Chain> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::shape(
            "sample_chain",
            format!("init has {} coords, target wants {dim}", init.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = init.to_vec();
    let (mut logp, mut grad) = target.log_density_grad(&q);
    if !logp.is_finite() {
        return Err(Error::non_finite("log density at chain init"));
    }

    let total = config.n_burn_in + config.n_samples;
    let mut samples = Array2::zeros((config.n_samples, dim));
    let mut accepted = 0usize;
    let mut n_divergences = 0usize;
    let mut p = vec![0.0; dim];
    let mut q_prop = vec![0.0; dim];
    let mut p_prop = vec![0.0; dim];

    for iter in 0..total {
        for pi in p.iter_mut() {
            *pi = rng.sample(StandardNormal);
        }
        let h0 = -logp + kinetic(&p);

        q_prop.copy_from_slice(&q);
        p_prop.copy_from_slice(&p);
        let mut grad_prop = grad.clone();
        half_kick(&mut p_prop, &grad_prop, config.step_size);
        let mut logp_prop = f64::NEG_INFINITY;
        for step in 0..config.n_leapfrog {
            drift(&mut q_prop, &p_prop, config.step_size);
            let (lp, g) = target.log_density_grad(&q_prop);
            logp_prop = lp;
            grad_prop = g;
            if step + 1 < config.n_leapfrog {
                kick(&mut p_prop, &grad_prop, config.step_size);
            }
        }
        half_kick(&mut p_prop, &grad_prop, config.step_size);

        let h1 = -logp_prop + kinetic(&p_prop);
        let energy_error = h1 - h0;
        let divergent = !energy_error.is_finite() || energy_error > config.divergence_threshold;
        if divergent {
            n_divergences += 1;
        } else {
            let accept = energy_error <= 0.0 || rng.random::<f64>() < (-energy_error).exp();
            if accept {
                q.copy_from_slice(&q_prop);
                logp = logp_prop;
                grad = grad_prop;
                accepted += 1;
            }
        }

        if iter >= config.n_burn_in {
            samples
                .row_mut(iter - config.n_burn_in)
                .assign(&ArrayView1::from(&q[..]));
        }
    }

    let ess = effective_sample_size(samples.view())?;
    Ok(Chain {
        samples,
        accept_rate: accepted as f64 / total as f64,
        n_divergences,
        ess,
        seed,
    })
}

/// Run `config.n_chains` chains in parallel; chain k uses `inits[k]` and
/// seed `base_seed + k`. Output order is by chain index.
pub fn run_chains(
    target: &(dyn LogDensity + Sync),
    inits: &[Vec<f64>],
    config: &HmcConfig,
    base_seed: u64,
) -> Result<Vec<Chain>> {
    config.validate()?;
    if inits.len() != config.n_chains {
        return Err(Error::invalid(format!(
            "{} inits for {} chains",
            inits.len(),
            config.n_chains
        )));
    }
    inits
        .par_iter()
        .enumerate()
        .map(|(k, init)| sample_chain(target, init, config, base_seed.wrapping_add(k as u64)))
        .collect()
}

/// Stack kept draws from all chains, in chain order.
pub fn pool_samples(chains: &[Chain]) -> Result<Array2<f64>> {
    let first = chains.first().ok_or_else(|| Error::EmptyInput("no chains to pool".into()))?;
    let dim = first.samples.ncols();
    let rows: usize = chains.iter().map(|c| c.samples.nrows()).sum();
    let mut out = Array2::zeros((rows, dim));
    let mut at = 0;
    for c in chains {
        if c.samples.ncols() != dim {
            return Err(Error::shape("pool_samples", "chains with mixed dims"));
        }
        out.slice_mut(ndarray::s![at..at + c.samples.nrows(), ..])
            .assign(&c.samples);
        at += c.samples.nrows();
    }
    Ok(out)
}

/// Per-dimension ESS via Geyer's initial positive sequence: sum
/// autocorrelations in adjacent pairs while the pair sums stay positive,
/// tau = -1 + 2 * sum(pairs), ESS = n / tau. Values above n are reported
/// as-is (antithetic draws really do carry more than n samples' worth of
/// information for mean estimates).
pub fn effective_sample_size(samples: ArrayView2<f64>) -> Result<Vec<DimEss>> {
    let n = samples.nrows();
    if n < 4 {
        return Err(Error::invalid(format!("ESS needs at least 4 draws, got {n}")));
    }
    let mut out = Vec::with_capacity(samples.ncols());
    for col in samples.columns() {
        out.push(ess_one(col));
    }
    Ok(out)
}

fn ess_one(x: ArrayView1<f64>) -> DimEss {
    let n = x.len();
    let mean = x.sum() / n as f64;
    let c0 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !c0.is_finite() || c0 <= 1e-20 * (1.0 + mean * mean) {
        return DimEss { ess: 1.0, degenerate: true };
    }
    let autocov = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (x[i] - mean) * (x[i + lag] - mean);
        }
        s / n as f64
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    // Antithetic chains drive tau toward zero from above; keep ESS finite.
    let tau = tau.max(1e-12);
    DimEss { ess: n as f64 / tau, degenerate: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::IsotropicGaussian;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    /// Independent Gaussians with per-dimension mean and variance.
    struct DiagGaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    }

    impl LogDensity for DiagGaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(self.mean.iter().zip(&self.var))
                .map(|(&xi, (&m, &v))| {
                    -0.5 * ((xi - m) * (xi - m) / v + (2.0 * std::f64::consts::PI * v).ln())
                })
                .sum()
        }
        fn grad(&self, x: &[f64]) -> Vec<f64> {
            x.iter()
                .zip(self.mean.iter().zip(&self.var))
                .map(|(&xi, (&m, &v))| -(xi - m) / v)
                .collect()
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = DiagGaussian { mean: vec![0.5, -1.0, 2.0], var: vec![1.0, 0.5, 2.0] };
        let q0 = vec![0.1, 0.2, -0.3];
        let p0 = vec![1.0, -0.5, 0.25];
        let (q1, p1) = leapfrog(&target, &q0, &p0, 0.1, 25);
        let p1_neg: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (q2, p2) = leapfrog(&target, &q1, &p1_neg, 0.1, 25);
        for i in 0..3 {
            assert_abs_diff_eq!(q2[i], q0[i], epsilon = 1e-6);
            assert_abs_diff_eq!(-p2[i], p0[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn acceptance_approaches_one_as_step_shrinks() {
        let target = IsotropicGaussian::new(10, 1.0).unwrap();
        let init = vec![0.0; 10];
        let mut rates = Vec::new();
        for &eps in &[1.8, 0.9, 0.05] {
            let cfg = HmcConfig {
                step_size: eps,
                n_leapfrog: 10,
                n_burn_in: 100,
                n_samples: 500,
                n_chains: 1,
                divergence_threshold: 1000.0,
            };
            let chain = sample_chain(&target, &init, &cfg, 42).unwrap();
            rates.push(chain.accept_rate);
        }
        // Energy error shrinks like eps^2, so the rate climbs toward 1;
        // the two finer steps may both saturate.
        assert!(rates[0] < rates[2] && rates[1] <= rates[2], "rates {rates:?}");
        assert!(rates[0] < 0.9, "coarse step should visibly reject: {rates:?}");
        assert!(rates[2] > 0.99, "rates {rates:?}");
    }

    #[test]
    fn chain_recovers_gaussian_moments() {
        let target = DiagGaussian { mean: vec![1.0, -1.0], var: vec![2.0, 0.5] };
        let cfg = HmcConfig {
            step_size: 0.25,
            n_leapfrog: 12,
            n_burn_in: 500,
            n_samples: 6000,
            n_chains: 1,
            divergence_threshold: 1000.0,
        };
        let chain = sample_chain(&target, &[0.0, 0.0], &cfg, 7).unwrap();
        assert_eq!(chain.samples.nrows(), 6000);
        for d in 0..2 {
            let col = chain.samples.column(d);
            let m = col.sum() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert_abs_diff_eq!(m, target.mean[d], epsilon = 0.1);
            assert_abs_diff_eq!(v, target.var[d], epsilon = 0.25 * target.var[d].max(1.0));
        }
        assert!(chain.n_divergences == 0);
        assert!(chain.min_ess() > 100.0, "min ess {}", chain.min_ess());
    }

    #[test]
    fn chains_are_deterministic_per_seed() {
        let target = IsotropicGaussian::new(3, 1.0).unwrap();
        let cfg = HmcConfig {
            step_size: 0.3,
            n_leapfrog: 8,
            n_burn_in: 20,
            n_samples: 50,
            n_chains: 2,
            divergence_threshold: 1000.0,
        };
        let inits = vec![vec![0.1, 0.1, 0.1], vec![-0.2, 0.0, 0.4]];
        let a = run_chains(&target, &inits, &cfg, 99).unwrap();
        let b = run_chains(&target, &inits, &cfg, 99).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.samples, cb.samples);
            assert_eq!(ca.accept_rate, cb.accept_rate);
        }
        assert_ne!(a[0].samples, a[1].samples);
        let pooled = pool_samples(&a).unwrap();
        assert_eq!(pooled.nrows(), 100);
        assert_eq!(pooled.row(50), a[1].samples.row(0));
    }

    #[test]
    fn oversized_steps_register_divergences() {
        // Variance 1e-6 target with step 5.0: the integrator explodes.
        let target = DiagGaussian { mean: vec![0.0], var: vec![1e-6] };
        let cfg = HmcConfig {
            step_size: 5.0,
            n_leapfrog: 10,
            n_burn_in: 0,
            n_samples: 50,
            n_chains: 1,
            divergence_threshold: 1000.0,
        };
        let chain = sample_chain(&target, &[0.0], &cfg, 1).unwrap();
        assert!(chain.n_divergences > 0);
        assert!(chain.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ess_of_iid_draws_is_near_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let draws = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let ess = effective_sample_size(draws.view()).unwrap();
        assert!(!ess[0].degenerate);
        assert!(
            ess[0].ess > 8000.0 && ess[0].ess < 12_000.0,
            "iid ESS {}",
            ess[0].ess
        );
    }

    #[test]
    fn ess_of_ar1_matches_closed_form() {
        // AR(1) with coefficient rho has ESS/n -> (1-rho)/(1+rho).
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut x = Array2::zeros((n, 1));
        let mut cur = 0.0_f64;
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            cur = rho * cur + (1.0 - rho * rho).sqrt() * e;
            x[[i, 0]] = cur;
        }
        let ess = effective_sample_size(x.view()).unwrap()[0].ess;
        let want = n as f64 * (1.0 - rho) / (1.0 + rho);
        assert!(
            (ess - want).abs() < 0.3 * want,
            "AR(1) ESS {ess:.1}, closed form {want:.1}"
        );
    }

    #[test]
    fn ess_flags_constant_chain() {
        let draws = Array2::from_elem((100, 2), 3.25);
        let ess = effective_sample_size(draws.view()).unwrap();
        for e in ess {
            assert!(e.degenerate);
            assert_eq!(e.ess, 1.0);
        }
    }

    #[test]
    fn ess_of_antithetic_chain_may_exceed_n() {
        let n = 1000;
        let x = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let m = x.clone().insert_axis(ndarray::Axis(1));
        let ess = effective_sample_size(m.view()).unwrap()[0];
        assert!(!ess.degenerate);
        assert!(ess.ess > n as f64, "antithetic ESS {}", ess.ess);
    }

    #[test]
    fn ess_rejects_tiny_chains() {
        let draws = Array2::zeros((3, 1));
        assert!(effective_sample_size(draws.view()).is_err());
    }
}
