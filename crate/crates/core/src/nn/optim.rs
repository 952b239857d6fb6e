//! Poly learning-rate schedule and Nesterov SGD.

use super::tensor::Scalar;

/// `lr0·(1 − epoch/epochs)^exponent`, clamped to `[0, lr0]`.
pub fn lr_poly(epoch: usize, epochs: usize, lr0: f64, exponent: f64) -> f64 {
    if epochs == 0 {
        return 0.0;
    }
    let frac = (1.0 - epoch as f64 / epochs as f64).clamp(0.0, 1.0);
    lr0 * frac.powf(exponent)
}

/// Nesterov momentum SGD: `v ← µv + g`, `p ← p − lr·(g + µv)`.
#[derive(Debug, Clone)]
pub struct Nesterov<F> {
    pub momentum: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Nesterov<F> {
    pub fn new(momentum: f64, params: &[Vec<F>]) -> Self {
        Nesterov {
            momentum,
            velocity: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Vec<F>], grads: &[Vec<F>], lr: f64) {
        let mu = F::c(self.momentum);
        let lr = F::c(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *p = *p - lr * (g + mu * *v);
            }
        }
    }
}

pub fn grad_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && max_norm > 0.0 {
        let s = F::c(max_norm / n);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    n
}
