//! First-order optimizers over flat parameter vectors.
//!
//! Both optimizers maximize: callers hand in ascent directions (gradients
//! of log-likelihoods or ELBOs), matching the sign convention used
//! everywhere else in this crate.

/// Plain gradient ascent with a fixed step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        for (p, g) in params.iter_mut().zip(grad) {
            *p += self.lr * g;
        }
    }
}

/// Adam with the usual defaults (b1 0.9, b2 0.999, eps 1e-8), ascent
/// convention, bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] += self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Maximize -0.5 (x - c)^2 elementwise; both optimizers must park at c.
    fn quad_grad(x: &[f64], c: &[f64]) -> Vec<f64> {
        x.iter().zip(c).map(|(xi, ci)| ci - xi).collect()
    }

    #[test]
    fn sgd_climbs_to_the_optimum() {
        let c = [1.5, -2.0, 0.25];
        let mut x = [0.0; 3];
        let opt = Sgd::new(0.2);
        for _ in 0..200 {
            let g = quad_grad(&x, &c);
            opt.step(&mut x, &g);
        }
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_climbs_to_the_optimum() {
        let c = [3.0, -1.0, 0.5, 10.0];
        let mut x = [0.0; 4];
        let mut opt = Adam::new(0.1, 4);
        for _ in 0..2000 {
            let g = quad_grad(&x, &c);
            opt.step(&mut x, &g);
        }
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-6, "{xi} vs {ci}");
        }
    }
}
