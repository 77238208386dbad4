//! Exact conjugate filtering for scalar Gaussian beliefs.
//!
//! The closed-form counterpart of the sampled pipeline: observing y with
//! known noise adds precision, so repeated Bayes updates are one-liners.
//! The changepoint runs show what those updates do when the data stream
//! switches regimes, and the Kalman-style pair (predict under OU
//! dynamics, update through a linearized readout) is the single-weight
//! analogue of filtering a network.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scalar Gaussian belief; variance stays strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: f64,
    pub var: f64,
}

impl GaussianBelief {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::non_finite("belief parameters"));
        }
        if !(var > 0.0) {
            return Err(Error::invalid(format!("belief variance {var} must be positive")));
        }
        Ok(Self { mean, var })
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// One conjugate update: precisions add, means combine precision-weighted.
pub fn filter_step(belief: GaussianBelief, y: f64, obs_var: f64) -> Result<GaussianBelief> {
    if !(obs_var > 0.0) || !obs_var.is_finite() {
        return Err(Error::invalid(format!("observation variance {obs_var} must be positive")));
    }
    if !y.is_finite() {
        return Err(Error::non_finite("observation"));
    }
    let post_prec = 1.0 / obs_var + 1.0 / belief.var;
    let var = 1.0 / post_prec;
    let mean = var * (y / obs_var + belief.mean / belief.var);
    GaussianBelief::new(mean, var)
}

/// Two-regime observation stream: n1 draws at mean1, then n2 at mean2,
/// all with shared observation noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangepointScenario {
    pub n1: usize,
    pub mean1: f64,
    pub n2: usize,
    pub mean2: f64,
    pub obs_var: f64,
    pub prior: GaussianBelief,
    pub seed: u64,
}

impl ChangepointScenario {
    /// 110 observations per regime at -1 / +1, unit noise, N(0,1) prior.
    pub fn balanced(seed: u64) -> Self {
        Self {
            n1: 110,
            mean1: -1.0,
            n2: 110,
            mean2: 1.0,
            obs_var: 1.0,
            prior: GaussianBelief { mean: 0.0, var: 1.0 },
            seed,
        }
    }

    /// 20 observations at -1, then 200 at +1; the posterior mean parks
    /// near the precision-weighted value 180/221.
    pub fn imbalanced(seed: u64) -> Self {
        Self {
            n1: 20,
            mean1: -1.0,
            n2: 200,
            mean2: 1.0,
            obs_var: 1.0,
            prior: GaussianBelief { mean: 0.0, var: 1.0 },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub observation: f64,
    pub post_mean: f64,
    pub post_var: f64,
}

#[derive(Debug, Clone)]
pub struct ChangepointRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_belief: GaussianBelief,
}

/// Draw the scenario's observations (deterministic in the seed) and
/// filter through them, recording the belief after every step.
pub fn run_changepoint(scenario: &ChangepointScenario) -> Result<ChangepointRun> {
    if scenario.n1 + scenario.n2 == 0 {
        return Err(Error::EmptyInput("changepoint scenario with no observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut belief = GaussianBelief::new(scenario.prior.mean, scenario.prior.var)?;
    let noise = scenario.obs_var.sqrt();
    let mut trajectory = Vec::with_capacity(scenario.n1 + scenario.n2);
    for t in 0..scenario.n1 + scenario.n2 {
        let regime_mean = if t < scenario.n1 { scenario.mean1 } else { scenario.mean2 };
        let y = regime_mean + noise * rng.sample::<f64, _>(StandardNormal);
        belief = filter_step(belief, y, scenario.obs_var)?;
        trajectory.push(TrajectoryPoint {
            t: t + 1,
            observation: y,
            post_mean: belief.mean,
            post_var: belief.var,
        });
    }
    Ok(ChangepointRun { trajectory, final_belief: belief })
}

/// `t,observation,post_mean,post_var` rows; rewriting the same run
/// produces identical bytes.
pub fn write_trajectory_csv(path: &Path, trajectory: &[TrajectoryPoint]) -> Result<()> {
    let mut out = String::from("t,observation,post_mean,post_var\n");
    for p in trajectory {
        writeln!(out, "{},{},{},{}", p.t, p.observation, p.post_mean, p.post_var)
            .expect("writing to a String cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// How to read the OU variance propagation term.
///
/// The printed recursion divides the posterior variance by (1-theta)^2;
/// shrinking the mean while inflating its uncertainty is unusual, but it
/// is what the recursion says, so it is the default and the conventional
/// damped form is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuVarianceConvention {
    AsPrinted,
    Squared,
}

/// Mean-reverting drift toward zero with fresh process noise per step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OuDynamics {
    pub theta: f64,
    pub eta: f64,
    pub convention: OuVarianceConvention,
}

impl OuDynamics {
    pub fn new(theta: f64, eta: f64, convention: OuVarianceConvention) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(Error::invalid(format!("mean reversion {theta} must be in [0, 1)")));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("process noise {eta} must be non-negative")));
        }
        Ok(Self { theta, eta, convention })
    }
}

/// Predict step: mean decays by (1-theta); variance picks up eta^2 plus
/// the propagated posterior variance under the chosen convention.
pub fn kalman_bnn_predict(belief: GaussianBelief, dynamics: &OuDynamics) -> Result<GaussianBelief> {
    let decay = 1.0 - dynamics.theta;
    let mean = decay * belief.mean;
    let carried = match dynamics.convention {
        OuVarianceConvention::AsPrinted => belief.var / (decay * decay),
        OuVarianceConvention::Squared => belief.var * decay * decay,
    };
    GaussianBelief::new(mean, dynamics.eta * dynamics.eta + carried)
}

/// Measurement update through a linearized scalar readout g: observing
/// y = g * w + noise adds g^2/obs_var precision.
pub fn kalman_bnn_update(
    belief: GaussianBelief,
    g: f64,
    y: f64,
    obs_var: f64,
) -> Result<GaussianBelief> {
    if !(obs_var > 0.0) || !obs_var.is_finite() {
        return Err(Error::invalid(format!("observation variance {obs_var} must be positive")));
    }
    if !g.is_finite() || !y.is_finite() {
        return Err(Error::non_finite("linearized update inputs"));
    }
    let post_prec = g * g / obs_var + 1.0 / belief.var;
    let var = 1.0 / post_prec;
    let mean = var * (belief.mean / belief.var + y * g / obs_var);
    GaussianBelief::new(mean, var)
}
