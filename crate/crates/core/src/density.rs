//! Log-density interface shared by priors and sampling targets.

use crate::autodiff::DiffScalarFn;
use crate::{Error, Result};

/// An unnormalized log density with analytic gradient.
///
/// Everything the sampler and the sequential pipeline touch (isotropic
/// priors, fitted mixtures, posterior targets) comes through this trait,
/// which is what lets a fitted density replace an exact prior between
/// tasks without the sampler noticing.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;

    fn log_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.log_density(x), self.grad(x))
    }
}

/// N(0, precision^-1 I) in `dim` dimensions, normalized.
#[derive(Debug, Clone)]
pub struct IsotropicGaussian {
    dim: usize,
    precision: f64,
}

impl IsotropicGaussian {
    pub fn new(dim: usize, precision: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("zero-dimensional prior".into()));
        }
        if !(precision > 0.0) || !precision.is_finite() {
            return Err(Error::invalid(format!("prior precision {precision} must be positive")));
        }
        Ok(Self { dim, precision })
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }
}

impl LogDensity for IsotropicGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let d = self.dim as f64;
        0.5 * d * (self.precision / (2.0 * std::f64::consts::PI)).ln() - 0.5 * self.precision * sq
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -self.precision * v).collect()
    }
}

/// Adapter so any [`LogDensity`] can run through the central-difference
/// gradient check.
pub struct DensityFn<'a>(pub &'a dyn LogDensity);

impl DiffScalarFn for DensityFn<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.0.log_density(x))
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.0.log_density_grad(x);
        Ok((v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use approx::assert_abs_diff_eq;

    #[test]
    fn isotropic_log_density_matches_scalar_formula() {
        let p = IsotropicGaussian::new(1, 4.0).unwrap();
        // N(0, 1/4): log density at x = -0.5*ln(2*pi/4) - 2 x^2
        let x = 0.3;
        let want = -0.5 * (2.0 * std::f64::consts::PI / 4.0).ln() - 2.0 * x * x;
        assert_abs_diff_eq!(p.log_density(&[x]), want, epsilon = 1e-14);
    }

    #[test]
    fn isotropic_gradient_passes_central_difference_check() {
        let p = IsotropicGaussian::new(5, 10.0).unwrap();
        let x = [0.1, -0.4, 0.0, 1.2, -2.0];
        let err = check_gradient(&DensityFn(&p), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err:e}");
    }

    #[test]
    fn rejects_bad_precision() {
        assert!(IsotropicGaussian::new(3, 0.0).is_err());
        assert!(IsotropicGaussian::new(3, -1.0).is_err());
        assert!(IsotropicGaussian::new(0, 1.0).is_err());
    }
}
