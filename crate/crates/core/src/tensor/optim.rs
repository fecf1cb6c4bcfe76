use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over every tensor of a [`ParamSet`] that carries a gradient.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f64> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated `grad` fields; tensors without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = &t.grad else { continue };
            for i in 0..t.data.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                t.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: T) -> T {
    let mut sq = T::zero();
    for t in params.tensors_mut() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|&x| x * x).sum::<T>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let f = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    norm
}
