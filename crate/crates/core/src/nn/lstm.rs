use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::Rng;

use super::{axpy, dot, sigmoid, uniform_init, Parameters};

/// One LSTM layer. Gate rows are stacked in the order input, forget, cell, output,
/// so `w_ih` is (4h × in), `w_hh` is (4h × h) and `bias` is 4h.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut bias = uniform_init(rng, 4 * hidden_dim, k);
        bias[hidden_dim..2 * hidden_dim].fill(1.0);
        Self {
            input_dim,
            hidden_dim,
            w_ih: uniform_init(rng, 4 * hidden_dim * input_dim, k),
            w_hh: uniform_init(rng, 4 * hidden_dim * hidden_dim, k),
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_ih: vec![0.0; 4 * hidden_dim * input_dim],
            w_hh: vec![0.0; 4 * hidden_dim * hidden_dim],
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    fn preactivations(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (ni, nh) = (self.input_dim, self.hidden_dim);
        (0..4 * nh)
            .map(|r| {
                self.bias[r] + dot(&self.w_ih[r * ni..(r + 1) * ni], x) + dot(&self.w_hh[r * nh..(r + 1) * nh], h)
            })
            .collect()
    }
}

/// Recurrent state, one (h, c) pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    /// Output of the top layer.
    pub fn output(&self) -> &[f64] {
        self.h.last().unwrap()
    }
}

/// Gradient flowing backwards into the previous step's (h, c).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCarry {
    pub dh: Vec<Vec<f64>>,
    pub dc: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct LayerTape {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    // post-activation gates i, f, g, o stacked
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Record of one taped step; consumed by [`Lstm::backward_step`].
#[derive(Debug)]
pub struct LstmStepTape {
    layers: Vec<LayerTape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, num_layers: usize, rng: &mut R) -> Self {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|l| LstmLayer::new(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| LstmLayer::zeros(l.input_dim, l.hidden_dim)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_state(&self) -> LstmState {
        let z = vec![vec![0.0; self.hidden_dim()]; self.layers.len()];
        LstmState { h: z.clone(), c: z }
    }

    pub fn zero_carry(&self) -> LstmCarry {
        let z = vec![vec![0.0; self.hidden_dim()]; self.layers.len()];
        LstmCarry { dh: z.clone(), dc: z }
    }

    pub fn step(&self, state: &LstmState, x: &[f64]) -> LstmState {
        self.step_impl(state, x, None)
    }

    pub fn step_taped(&self, state: &LstmState, x: &[f64]) -> (LstmState, LstmStepTape) {
        let mut layers = Vec::with_capacity(self.layers.len());
        let s = self.step_impl(state, x, Some(&mut layers));
        (s, LstmStepTape { layers })
    }

    fn step_impl(&self, state: &LstmState, x: &[f64], mut tape: Option<&mut Vec<LayerTape>>) -> LstmState {
        debug_assert_eq!(x.len(), self.input_dim());
        let nh = self.hidden_dim();
        let mut out = LstmState { h: Vec::with_capacity(self.layers.len()), c: Vec::with_capacity(self.layers.len()) };
        let mut input = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.preactivations(&input, &state.h[l]);
            let mut gates = vec![0.0; 4 * nh];
            let mut c = vec![0.0; nh];
            let mut h = vec![0.0; nh];
            let mut tanh_c = vec![0.0; nh];
            for j in 0..nh {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[nh + j]);
                let g = z[2 * nh + j].tanh();
                let o = sigmoid(z[3 * nh + j]);
                c[j] = f * state.c[l][j] + i * g;
                tanh_c[j] = c[j].tanh();
                h[j] = o * tanh_c[j];
                gates[j] = i;
                gates[nh + j] = f;
                gates[2 * nh + j] = g;
                gates[3 * nh + j] = o;
            }
            if let Some(t) = tape.as_deref_mut() {
                t.push(LayerTape { x: input, h_prev: state.h[l].clone(), c_prev: state.c[l].clone(), gates, tanh_c });
            }
            input = h.clone();
            out.h.push(h);
            out.c.push(c);
        }
        out
    }

    /// Backpropagates one step. `d_out` is ∂L/∂h of the top layer coming from
    /// this step's consumers; `carry` holds gradients from the following step.
    /// Returns ∂L/∂x and the carry for the preceding step.
    pub fn backward_step(&self, tape: LstmStepTape, d_out: &[f64], carry: LstmCarry, grad: &mut Lstm) -> (Vec<f64>, LstmCarry) {
        let nh = self.hidden_dim();
        let nl = self.layers.len();
        let LstmCarry { dh: mut carry_dh, dc: mut carry_dc } = carry;
        let mut prev = self.zero_carry();
        let mut d_from_above = d_out.to_vec();
        let mut dx = Vec::new();
        for (l, t) in tape.layers.into_iter().enumerate().rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            let dh = &mut carry_dh[l];
            axpy(dh, 1.0, &d_from_above);
            let dc = &mut carry_dc[l];
            let mut dz = vec![0.0; 4 * nh];
            for j in 0..nh {
                let (i, f, gg, o) = (t.gates[j], t.gates[nh + j], t.gates[2 * nh + j], t.gates[3 * nh + j]);
                let d_o = dh[j] * t.tanh_c[j];
                let dcj = dc[j] + dh[j] * o * (1.0 - t.tanh_c[j] * t.tanh_c[j]);
                dz[j] = dcj * gg * i * (1.0 - i);
                dz[nh + j] = dcj * t.c_prev[j] * f * (1.0 - f);
                dz[2 * nh + j] = dcj * i * (1.0 - gg * gg);
                dz[3 * nh + j] = d_o * o * (1.0 - o);
                prev.dc[l][j] = dcj * f;
            }
            let ni = layer.input_dim;
            let mut dxi = vec![0.0; ni];
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                axpy(&mut g.w_ih[r * ni..(r + 1) * ni], d, &t.x);
                axpy(&mut g.w_hh[r * nh..(r + 1) * nh], d, &t.h_prev);
                axpy(&mut dxi, d, &layer.w_ih[r * ni..(r + 1) * ni]);
                axpy(&mut prev.dh[l], d, &layer.w_hh[r * nh..(r + 1) * nh]);
            }
            if l == 0 {
                dx = dxi;
            } else {
                d_from_above = dxi;
            }
        }
        debug_assert!(nl > 0);
        (dx, prev)
    }
}

impl Parameters for Lstm {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.w_ih.as_slice(), l.w_hh.as_slice(), l.bias.as_slice()]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w_ih.as_mut_slice(), l.w_hh.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    // straightforward re-implementation with explicit per-gate matrices
    fn reference_step(layer: &LstmLayer, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nh = layer.hidden_dim;
        let ni = layer.input_dim;
        let gate = |k: usize, j: usize| {
            let r = k * nh + j;
            let mut s = layer.bias[r];
            for a in 0..ni {
                s += layer.w_ih[r * ni + a] * x[a];
            }
            for a in 0..nh {
                s += layer.w_hh[r * nh + a] * h[a];
            }
            s
        };
        let mut h2 = vec![0.0; nh];
        let mut c2 = vec![0.0; nh];
        for j in 0..nh {
            let i = naive_sigmoid(gate(0, j));
            let f = naive_sigmoid(gate(1, j));
            let g = gate(2, j).tanh();
            let o = naive_sigmoid(gate(3, j));
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let lstm = Lstm { layers: vec![LstmLayer::zeros(3, 4)] };
        let s = lstm.step(&lstm.zero_state(), &[1.0, -2.0, 0.5]);
        assert!(s.output().iter().all(|&v| v == 0.0));
        assert!(s.c[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lstm = Lstm::new(3, 8, 2, &mut rng);
        let k = 1.0 / 8f64.sqrt();
        for l in &lstm.layers {
            assert!(l.bias[8..16].iter().all(|&b| b == 1.0));
            assert!(l.w_ih.iter().chain(&l.w_hh).all(|w| w.abs() <= k));
        }
    }

    #[test]
    fn matches_reference_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lstm = Lstm::new(3, 5, 2, &mut rng);
        let mut state = lstm.zero_state();
        for (l, h) in state.h.iter_mut().enumerate() {
            for (j, v) in h.iter_mut().enumerate() {
                *v = ((l * 7 + j) as f64).sin() * 0.5;
            }
        }
        state.c = state.h.iter().map(|h| h.iter().map(|v| v * 2.0).collect()).collect();
        let x = [0.3, -0.8, 1.2];
        let s = lstm.step(&state, &x);
        let (h0, c0) = reference_step(&lstm.layers[0], &x, &state.h[0], &state.c[0]);
        let (h1, c1) = reference_step(&lstm.layers[1], &h0, &state.h[1], &state.c[1]);
        for (a, b) in s.h[0].iter().zip(&h0).chain(s.h[1].iter().zip(&h1)).chain(s.c[0].iter().zip(&c0)).chain(s.c[1].iter().zip(&c1)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.output().iter().all(|v| v.abs() < 1.0));
    }

    /// Five-step autoregressive chain: the LSTM input at each step is the
    /// previous prediction, which is itself produced by a Mish head.
    fn ar_loss(lstm: &Lstm, head: &Mlp, x0: &[f64], targets: &[[f64; 2]]) -> f64 {
        let mut s = lstm.zero_state();
        let mut y = x0.to_vec();
        let mut loss = 0.0;
        for t in targets {
            s = lstm.step(&s, &y);
            let v = head.forward(s.output(), 1);
            y = vec![y[0] + 0.5 * v[0], y[1] + 0.5 * v[1]];
            loss += (y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2);
        }
        loss
    }

    #[test]
    fn bptt_through_autoregressive_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lstm = Lstm::new(2, 4, 2, &mut rng);
        let mut head = Mlp::new(&[4, 6, 2], Activation::Mish, Activation::Identity, &mut rng);
        let x0 = [0.2, -0.4];
        let targets = [[0.1, 0.0], [0.3, -0.2], [0.0, 0.4], [-0.2, 0.1], [0.5, 0.5], [0.2, -0.1]];

        // forward with tapes
        let mut s = lstm.zero_state();
        let mut y = x0.to_vec();
        let mut tapes = Vec::new();
        let mut ys = Vec::new();
        for _ in &targets {
            let (s2, lt) = lstm.step_taped(&s, &y);
            let (v, ht) = head.forward_taped(s2.output(), 1);
            y = vec![y[0] + 0.5 * v[0], y[1] + 0.5 * v[1]];
            ys.push(y.clone());
            tapes.push((lt, ht));
            s = s2;
        }
        // backward
        let mut g_lstm = lstm.zeros_like();
        let mut g_head = head.zeros_like();
        let mut carry = lstm.zero_carry();
        let mut dy = vec![0.0; 2];
        for (k, (lt, ht)) in tapes.into_iter().enumerate().rev() {
            for d in 0..2 {
                dy[d] += 2.0 * (ys[k][d] - targets[k][d]);
            }
            let dv: Vec<f64> = dy.iter().map(|g| 0.5 * g).collect();
            let dh = head.backward(ht, &dv, &mut g_head);
            let (dx, c) = lstm.backward_step(lt, &dh, carry, &mut g_lstm);
            carry = c;
            // y_k = y_{k-1} + 0.5 v_k, and y_{k-1} also fed the LSTM
            for d in 0..2 {
                dy[d] += dx[d];
            }
        }

        let h = 1e-5;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4), "{what}: fd {fd} vs analytic {an}");
        };
        for idx in 0..lstm.num_params() {
            let orig = lstm.get_flat(idx);
            lstm.set_flat(idx, orig + h);
            let lp = ar_loss(&lstm, &head, &x0, &targets);
            lstm.set_flat(idx, orig - h);
            let lm = ar_loss(&lstm, &head, &x0, &targets);
            lstm.set_flat(idx, orig);
            check((lp - lm) / (2.0 * h), g_lstm.get_flat(idx), "lstm");
        }
        for idx in 0..head.num_params() {
            let orig = head.get_flat(idx);
            head.set_flat(idx, orig + h);
            let lp = ar_loss(&lstm, &head, &x0, &targets);
            head.set_flat(idx, orig - h);
            let lm = ar_loss(&lstm, &head, &x0, &targets);
            head.set_flat(idx, orig);
            check((lp - lm) / (2.0 * h), g_head.get_flat(idx), "head");
        }
        // gradient w.r.t. the initial input
        for d in 0..2 {
            let mut xp = x0;
            xp[d] += h;
            let mut xm = x0;
            xm[d] -= h;
            let fd = (ar_loss(&lstm, &head, &xp, &targets) - ar_loss(&lstm, &head, &xm, &targets)) / (2.0 * h);
            check(fd, dy[d], "x0");
        }
    }

    #[test]
    fn unused_block_gets_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lstm = Lstm::new(2, 3, 1, &mut rng);
        let (s, tape) = lstm.step_taped(&lstm.zero_state(), &[0.4, 0.1]);
        let mut g = lstm.zeros_like();
        let d: Vec<f64> = s.output().iter().map(|v| *v).collect();
        lstm.backward_step(tape, &d, lstm.zero_carry(), &mut g);
        // h_prev = 0 so the recurrent weights cannot influence a single step
        assert!(g.layers[0].w_hh.iter().all(|&v| v == 0.0));
    }
}
