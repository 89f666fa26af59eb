//! Adam, gradient clipping and the Huber loss.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    /// One ascent step.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64]) {
        let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
        self.step(params, &neg);
    }
}

/// Rescales `grads` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Huber loss of `residual` and its derivative.
pub fn huber(residual: f64, delta: f64) -> (f64, f64) {
    if residual.abs() <= delta {
        (0.5 * residual * residual, residual)
    } else {
        (delta * (residual.abs() - 0.5 * delta), delta * residual.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(1, 1e-3);
        let mut p = [0.0];
        adam.step(&mut p, &[1.0]);
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_gives_sign_steps() {
        let mut adam = Adam::new(2, 0.01);
        let mut p = [0.0, 0.0];
        for _ in 0..100 {
            let before = p;
            adam.step(&mut p, &[5.0, -0.001]);
            assert!(((p[0] - before[0]) + 0.01).abs() < 1e-4);
            assert!(((p[1] - before[1]) - 0.01).abs() < 1e-4);
        }
    }

    #[test]
    fn clipping_and_huber() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(huber(2.0, 10.0), (2.0, 2.0));
        assert_eq!(huber(-12.0, 10.0), (70.0, -10.0));
        assert_eq!(huber(0.0, 10.0), (0.0, 0.0));
    }
}
