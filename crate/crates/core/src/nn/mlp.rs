use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::Rng;

use super::{axpy, dot, uniform_init, Activation, Parameters};

/// Dense layer y = W x + b with W stored row-major (out × in).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: uniform_init(rng, in_dim * out_dim, k),
            bias: uniform_init(rng, out_dim, k),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Row-major batch forward: `x` is batch × in, result batch × out.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        let mut out = vec![0.0; batch * self.out_dim];
        for b in 0..batch {
            let xb = &x[b * self.in_dim..(b + 1) * self.in_dim];
            let ob = &mut out[b * self.out_dim..(b + 1) * self.out_dim];
            for (o, y) in ob.iter_mut().enumerate() {
                *y = dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], xb) + self.bias[o];
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns ∂L/∂x.
    pub fn backward(&self, x: &[f64], dz: &[f64], batch: usize, grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; batch * self.in_dim];
        for b in 0..batch {
            let xb = &x[b * self.in_dim..(b + 1) * self.in_dim];
            let dzb = &dz[b * self.out_dim..(b + 1) * self.out_dim];
            let dxb = &mut dx[b * self.in_dim..(b + 1) * self.in_dim];
            for (o, &g) in dzb.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                axpy(&mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim], g, xb);
                axpy(dxb, g, &self.weight[o * self.in_dim..(o + 1) * self.in_dim]);
            }
        }
        dx
    }
}

/// Feed-forward stack; `activations[i]` follows `layers[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug)]
pub struct MlpTape {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output].
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers: Vec<Linear> = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let mut activations = vec![hidden; layers.len()];
        *activations.last_mut().unwrap() = output;
        Self { layers, activations }
    }

    pub fn from_layers(layers: Vec<Linear>, activations: Vec<Activation>) -> Self {
        assert_eq!(layers.len(), activations.len());
        for w in layers.windows(2) {
            assert_eq!(w[0].out_dim, w[1].in_dim, "MLP dims must chain");
        }
        Self { layers, activations }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect(),
            activations: self.activations.clone(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    /// Forward without recording.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(&h, batch);
            if *act != Activation::Identity {
                for v in h.iter_mut() {
                    *v = act.apply(*v);
                }
            }
        }
        h
    }

    pub fn forward_taped(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(&h, batch);
            let out: Vec<f64> = z.iter().map(|v| act.apply(*v)).collect();
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        (h, MlpTape { batch, inputs, pre })
    }

    /// Consumes the tape, accumulates gradients into `grad`, returns ∂L/∂x.
    pub fn backward(&self, tape: MlpTape, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let act = self.activations[l];
            if act != Activation::Identity {
                for (g, z) in d.iter_mut().zip(&tape.pre[l]) {
                    *g *= act.derivative(*z);
                }
            }
            d = self.layers[l].backward(&tape.inputs[l], &d, tape.batch, &mut grad.layers[l]);
        }
        d
    }

    /// Scales the output layer's weights and biases (used to start a head near zero).
    pub fn scale_output_layer(&mut self, s: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight.iter_mut().for_each(|w| *w *= s);
        last.bias.iter_mut().for_each(|b| *b *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.all_finite()
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }
}
