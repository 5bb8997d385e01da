//! Minimal neural substrate: dense layers, LSTM, Adam, and a checkpoint
//! container. Gradients are exact reverse-mode; forward passes that need a
//! backward pass return a tape that the backward call consumes.

mod activation;
mod adam;
pub mod checkpoint;
mod lstm;
mod mlp;

pub use activation::{mish, mish_derivative, sigmoid, softplus, Activation};
pub use adam::{Adam, AdamConfig, Scalar};
pub use checkpoint::{Checkpoint, Tensor};
pub use lstm::{Lstm, LstmCarry, LstmLayer, LstmState, LstmStepTape};
pub use mlp::{Linear, Mlp, MlpTape};

use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::Rng;

/// Anything made of flat f64 tensors; gradients use the same type.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
        n
    }

    /// Flat read by global index, for finite-difference checks.
    fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// target ← τ·online + (1 − τ)·target
pub fn polyak_update<P: Parameters>(target: &mut P, online: &P, tau: f64) {
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (a, b) in t.iter_mut().zip(o) {
            *a = tau * b + (1.0 - tau) * *a;
        }
    }
}

/// Adds `src` into `dst` elementwise.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) {
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

pub(crate) fn uniform_init<R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// y += a · x
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise without reassociation
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
