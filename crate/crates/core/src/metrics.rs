//! Error statistics over per-step traces.

use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
    pub std: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, p95: percentile(xs, 95.0), max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max), std: var.sqrt(), count: xs.len() }
    }
}

/// Linear-interpolated percentile (0–100) of unsorted data.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}
