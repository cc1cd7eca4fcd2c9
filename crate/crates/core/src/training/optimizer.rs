use crate::config::TrainConfig;
use crate::numerics::{Grid, ParamSet};
use crate::scalar::Real;

/// Adam with decoupled weight decay: each step first shrinks the parameter by
/// `lr * weight_decay`, then applies the bias-corrected moment update.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    lr: S,
    beta1: S,
    beta2: S,
    epsilon: S,
    weight_decay: S,
    step: i32,
    first: Vec<Grid<S>>,
    second: Vec<Grid<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(cfg: &TrainConfig, params: &ParamSet<S>) -> Self {
        let zeros: Vec<Grid<S>> = params.iter().map(|p| Grid::zeros(p.value.shape())).collect();
        Self {
            lr: S::lit(cfg.lr),
            beta1: S::lit(cfg.beta1),
            beta2: S::lit(cfg.beta2),
            epsilon: S::lit(cfg.epsilon),
            weight_decay: S::lit(cfg.weight_decay),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update from the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet<S>) {
        self.step += 1;
        let one = S::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        let decay = one - self.lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad.values();
            let values = p.value.values_mut();
            for (((x, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *x *= decay;
                *mi = self.beta1 * *mi + (one - self.beta1) * g;
                *vi = self.beta2 * *vi + (one - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping. A zero ceiling disables clipping.
pub fn clip_grad_norm<S: Real>(params: &mut ParamSet<S>, max_norm: S) -> S {
    let norm = params.grad_norm();
    if max_norm > S::zero() && norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}
