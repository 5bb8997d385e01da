use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;

use super::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moments mirror the parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Updates skipped because the gradient contained NaN or ±inf.
    pub skipped: u64,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<Vec<f64>> = params.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
        Self { config, step: 0, m: shapes.clone(), v: shapes, skipped: 0 }
    }

    /// Applies one update; returns false (and leaves `params` untouched) if
    /// any gradient entry is non-finite.
    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) -> bool {
        if !grads.all_finite() {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        true
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// A bare scalar as a parameter set (used for learnable log-scales).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalar(pub [f64; 1]);

impl Parameters for Scalar {
    fn tensors(&self) -> Vec<&[f64]> {
        alloc::vec![&self.0[..]]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        alloc::vec![&mut self.0[..]]
    }
}
