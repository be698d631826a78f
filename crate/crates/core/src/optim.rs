//! Plain stochastic gradient descent over flat parameter views.

use crate::error::{arg_err, shape_err, Result};

/// `p <- p - lr * g` elementwise.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return shape_err(format!(
            "sgd_step: {} params vs {} grads",
            params.len(),
            grads.len()
        ));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return arg_err(format!("learning rate {} must be positive", lr));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Clips `grads` in place so that their L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// SGD with classical momentum: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Momentum {
    pub mu: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(len: usize, mu: f64) -> Self {
        Self {
            mu,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return shape_err(format!(
                "momentum state holds {} values, got {} grads",
                self.velocity.len(),
                grads.len()
            ));
        }
        for (v, g) in self.velocity.iter_mut().zip(grads) {
            *v = self.mu * *v + g;
        }
        sgd_step(params, &self.velocity, lr)
    }
}
