//! Anchored autoregressive LSTM estimator of the leader state.
//!
//! On every delivered packet the recurrent state is rebuilt by encoding the
//! window of earlier packets, the packet becomes the anchor, and predictions
//! are produced by stepping forward from it one tick at a time:
//! ŝ_k = ŝ_{k−1} + α·v_k, where v_k is the head's output for the running
//! hidden state and the previous prediction. Between deliveries the rollout
//! only ever grows, so consecutive outputs differ by exactly α·v_k.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::control::FEEDFORWARD_ACCEL_LIMIT;
use crate::delay::{DelayChannel, DelayConfig, DelayedPacket};
use crate::nn::checkpoint::{round_to_f32, Checkpoint};
use crate::nn::{Activation, Adam, AdamConfig, Lstm, LstmState, Mlp, Parameters};
use crate::trajectory::{simulate_leader, Leader, LeaderDrive, TrajectoryParams, TrajectoryRanges};
use crate::control::GainConfig;
use crate::{to_ticks, Error, Result};

pub const CHECKPOINT_KIND: &str = "estimator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub dof: usize,
    /// W: packets kept in the input window, anchor included.
    pub window: usize,
    /// H: maximum autoregressive extension per anchor.
    pub horizon: usize,
    pub hidden: usize,
    pub layers: usize,
    pub head_hidden: Vec<usize>,
    pub dt: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { dof: 2, window: 50, horizon: 80, hidden: 64, layers: 1, head_hidden: vec![64], dt: crate::DEFAULT_DT }
    }
}

impl EstimatorConfig {
    /// Full-size setting (150-step window, 245-step horizon, 3×256 LSTM).
    pub fn paper(dof: usize) -> Self {
        Self { dof, window: 150, horizon: 245, hidden: 256, layers: 3, head_hidden: vec![256], dt: crate::DEFAULT_DT }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dof
    }

    /// Packet feature: [q, q̇, ω_s].
    pub fn feature_dim(&self) -> usize {
        2 * self.dof + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dof == 0 || self.window == 0 || self.horizon == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidParam("estimator sizes must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParam("estimator dt must be positive".into()));
        }
        Ok(())
    }
}

/// Network parameters plus the fixed input/output scalings.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorNet {
    pub config: EstimatorConfig,
    pub lstm: Lstm,
    /// Maps [h_k, normalized ŝ_{k−1}] to a raw increment direction.
    pub head: Mlp,
    /// α = exp(log_alpha) > 0.
    pub log_alpha: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Typical per-tick change of each state component; multiplies the head output.
    pub step_scale: Vec<f64>,
}

impl EstimatorNet {
    pub fn new<R: Rng + ?Sized>(config: EstimatorConfig, rng: &mut R) -> Self {
        let f = config.feature_dim();
        let s = config.state_dim();
        let lstm = Lstm::new(f, config.hidden, config.layers, rng);
        let mut dims = vec![config.hidden + s];
        dims.extend(&config.head_hidden);
        dims.push(s);
        let mut head = Mlp::new(&dims, Activation::Mish, Activation::Identity, rng);
        head.scale_output_layer(0.1);
        Self {
            lstm,
            head,
            log_alpha: 0.0,
            feature_mean: vec![0.0; f],
            feature_std: vec![1.0; f],
            step_scale: vec![config.dt; s],
            config,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.lstm = self.lstm.zeros_like();
        z.head = self.head.zeros_like();
        z.log_alpha = 0.0;
        z
    }

    fn normalize_feature(&self, state: &[f64], omega: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(state.len() + 1);
        for (i, v) in state.iter().chain(core::iter::once(&omega)).enumerate() {
            x.push((v - self.feature_mean[i]) / self.feature_std[i]);
        }
        x
    }

    fn head_input(&self, h: &[f64], state: &[f64]) -> Vec<f64> {
        let mut x = h.to_vec();
        x.extend(state.iter().enumerate().map(|(i, v)| (v - self.feature_mean[i]) / self.feature_std[i]));
        x
    }

    /// One autoregressive step from `prev`; returns (v_k, Δ_k, ŝ_k).
    fn ar_step(&self, hidden: &mut LstmState, prev: &[f64], omega: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        *hidden = self.lstm.step(hidden, &self.normalize_feature(prev, omega));
        let raw = self.head.forward(&self.head_input(hidden.output(), prev), 1);
        let v: Vec<f64> = raw.iter().zip(&self.step_scale).map(|(r, s)| r * s).collect();
        let alpha = self.alpha();
        let delta: Vec<f64> = v.iter().map(|vi| vi * alpha).collect();
        let next = prev.iter().zip(&delta).map(|(p, d)| p + d).collect();
        (v, delta, next)
    }

    /// Fits input normalization and output step scales to training samples.
    pub fn fit_scalings(&mut self, samples: &[Sample]) {
        let f = self.config.feature_dim();
        let s = self.config.state_dim();
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut count = 0.0;
        let mut dsq = vec![0.0; s];
        let mut dcount = 0.0;
        for smp in samples {
            for row in smp.window.chunks(f).chain(core::iter::once(smp.anchor.as_slice())) {
                for i in 0..f {
                    sum[i] += row[i];
                    sq[i] += row[i] * row[i];
                }
                count += 1.0;
            }
            let mut prev = &smp.anchor[..s];
            for row in smp.future.chunks(s) {
                for i in 0..s {
                    let d = row[i] - prev[i];
                    dsq[i] += d * d;
                }
                dcount += 1.0;
                prev = row;
            }
        }
        if count > 1.0 {
            for i in 0..f {
                let m = sum[i] / count;
                self.feature_mean[i] = m;
                self.feature_std[i] = (sq[i] / count - m * m).max(0.0).sqrt().max(1e-3);
            }
        }
        if dcount > 0.0 {
            for i in 0..s {
                self.step_scale[i] = (dsq[i] / dcount).sqrt().max(1e-6);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set_attr("dof", c.dof);
        ck.set_attr("window", c.window);
        ck.set_attr("horizon", c.horizon);
        ck.set_attr("dt", c.dt);
        ck.put_lstm("lstm", &self.lstm);
        ck.put_mlp("head", &self.head);
        ck.push("log_alpha", &[1], &[self.log_alpha]);
        ck.push("feature_mean", &[c.feature_dim()], &self.feature_mean);
        ck.push("feature_std", &[c.feature_dim()], &self.feature_std);
        ck.push("step_scale", &[c.state_dim()], &self.step_scale);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let lstm = ck.get_lstm("lstm")?;
        let head = ck.get_mlp("head")?;
        let dof: usize = ck.attr_parse("dof")?;
        let config = EstimatorConfig {
            dof,
            window: ck.attr_parse("window")?,
            horizon: ck.attr_parse("horizon")?,
            hidden: lstm.hidden_dim(),
            layers: lstm.num_layers(),
            head_hidden: head.dims()[1..head.dims().len() - 1].to_vec(),
            dt: ck.attr_parse("dt")?,
        };
        config.validate()?;
        if lstm.input_dim() != config.feature_dim() || head.out_dim() != config.state_dim() || head.in_dim() != config.hidden + config.state_dim() {
            return Err(Error::Checkpoint("estimator network shapes disagree with its dof".into()));
        }
        Ok(Self {
            lstm,
            head,
            log_alpha: ck.read("log_alpha", &[1])?[0],
            feature_mean: ck.read("feature_mean", &[config.feature_dim()])?,
            feature_std: ck.read("feature_std", &[config.feature_dim()])?,
            step_scale: ck.read("step_scale", &[config.state_dim()])?,
            config,
        })
    }

    /// Rounds trainable values through f32 so the in-memory net equals its saved form.
    pub fn quantize(&mut self) {
        round_to_f32(self);
        for v in self.feature_mean.iter_mut().chain(&mut self.feature_std).chain(&mut self.step_scale) {
            *v = *v as f32 as f64;
        }
    }
}

impl Parameters for EstimatorNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.lstm.tensors();
        t.extend(self.head.tensors());
        t.push(core::slice::from_ref(&self.log_alpha));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.lstm.tensors_mut();
        t.extend(self.head.tensors_mut());
        t.push(core::slice::from_mut(&mut self.log_alpha));
        t
    }
}

/// One estimate of the leader state at the current time.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Finite difference of consecutive predicted velocities, clamped.
    pub qddot: Vec<f64>,
    /// Rollout index returned (ticks since the anchor was sent, capped at H).
    pub steps: usize,
    /// Requested time lies beyond the horizon; the last prediction is held.
    pub saturated: bool,
    /// Incremented on every delivered packet.
    pub epoch: u64,
}

/// Runtime estimator: shared immutable network plus per-loop state.
#[derive(Clone, Debug)]
pub struct EstimatorCore {
    net: Arc<EstimatorNet>,
    window: VecDeque<Vec<f64>>,
    hidden: LstmState,
    anchor: Option<DelayedPacket>,
    rollout: Vec<Vec<f64>>,
    increments: Vec<Vec<f64>>,
    head_outputs: Vec<Vec<f64>>,
    epoch: u64,
    warm_up: bool,
}

impl EstimatorCore {
    pub fn new(net: Arc<EstimatorNet>) -> Self {
        let hidden = net.lstm.zero_state();
        Self {
            net,
            window: VecDeque::new(),
            hidden,
            anchor: None,
            rollout: Vec::new(),
            increments: Vec::new(),
            head_outputs: Vec::new(),
            epoch: 0,
            warm_up: true,
        }
    }

    pub fn net(&self) -> &Arc<EstimatorNet> {
        &self.net
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.net.clone());
    }

    pub fn anchor(&self) -> Option<&DelayedPacket> {
        self.anchor.as_ref()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Fewer than W packets have been seen; the window is a prefix.
    pub fn warm_up(&self) -> bool {
        self.warm_up
    }

    pub fn rollout(&self) -> &[Vec<f64>] {
        &self.rollout
    }

    /// Δ_k = α·v_k applied to reach rollout entry k (k ≥ 1).
    pub fn increment(&self, k: usize) -> Option<&[f64]> {
        self.increments.get(k.checked_sub(1)?).map(|v| v.as_slice())
    }

    /// Raw head output v_k (already multiplied by the fixed step scale).
    pub fn head_output(&self, k: usize) -> Option<&[f64]> {
        self.head_outputs.get(k.checked_sub(1)?).map(|v| v.as_slice())
    }

    /// Makes `packet` the new anchor and restarts the rollout from it.
    pub fn ingest_packet(&mut self, packet: &DelayedPacket, _now: f64) {
        let mut feat = packet.payload.stacked();
        feat.push(packet.sampled_delay);
        self.window.push_back(feat);
        while self.window.len() > self.net.config.window {
            self.window.pop_front();
        }
        self.warm_up = self.window.len() < self.net.config.window;
        let net = &self.net;
        let mut h = net.lstm.zero_state();
        for row in self.window.iter().take(self.window.len() - 1) {
            let s = net.config.state_dim();
            h = net.lstm.step(&h, &net.normalize_feature(&row[..s], row[s]));
        }
        self.hidden = h;
        self.rollout.clear();
        self.rollout.push(packet.payload.stacked());
        self.increments.clear();
        self.head_outputs.clear();
        self.anchor = Some(packet.clone());
        self.epoch += 1;
    }

    fn extend_to(&mut self, k: usize) {
        let omega = self.anchor.as_ref().map(|a| a.sampled_delay).unwrap_or(0.0);
        while self.rollout.len() <= k {
            let prev = self.rollout.last().unwrap().clone();
            let (v, delta, next) = self.net.ar_step(&mut self.hidden, &prev, omega);
            self.head_outputs.push(v);
            self.increments.push(delta);
            self.rollout.push(next);
        }
    }

    /// Leader state estimate at `now`.
    pub fn predict_now(&mut self, now: f64) -> Result<Prediction> {
        let anchor = self.anchor.as_ref().ok_or(Error::NotReady("no leader packet received yet"))?;
        let dt = self.net.config.dt;
        let elapsed = to_ticks(now - anchor.send_time, dt).max(0) as usize;
        let horizon = self.net.config.horizon;
        let k = elapsed.min(horizon);
        // one extra step lets a zero-step query still produce an acceleration
        self.extend_to(if k == 0 { 1.min(horizon) } else { k });
        let n = self.net.config.dof;
        let cur = &self.rollout[k];
        let qddot = if k >= 1 {
            crate::control::finite_difference_accel(&self.rollout[k - 1][n..], &cur[n..], dt, FEEDFORWARD_ACCEL_LIMIT)
        } else if self.rollout.len() > 1 {
            crate::control::finite_difference_accel(&cur[n..], &self.rollout[1][n..], dt, FEEDFORWARD_ACCEL_LIMIT)
        } else {
            vec![0.0; n]
        };
        Ok(Prediction {
            q: cur[..n].to_vec(),
            qdot: cur[n..].to_vec(),
            qddot,
            steps: k,
            saturated: elapsed > horizon,
            epoch: self.epoch,
        })
    }
}

/// One training example cut from a simulated episode at a packet delivery.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Features of the (up to W − 1) packets delivered before the anchor, oldest first.
    pub window: Vec<f64>,
    /// Anchor feature [q, q̇, ω_s].
    pub anchor: Vec<f64>,
    /// Ground-truth states at anchor + 1 … anchor + H ticks, row-major H × 2n.
    pub future: Vec<f64>,
}

/// Runs a leader episode through a delay channel and cuts one sample per delivery.
pub fn collect_samples(
    arm: &ArmParams,
    traj: &TrajectoryParams,
    delay: &DelayConfig,
    channel_seed: u64,
    steps: usize,
    config: &EstimatorConfig,
) -> Result<Vec<Sample>> {
    let h = config.horizon;
    let states = simulate_leader(arm, traj, steps + h, config.dt)?;
    let mut channel = DelayChannel::new(DelayConfig { dt: config.dt, ..delay.clone() }, channel_seed);
    let mut window: VecDeque<Vec<f64>> = VecDeque::new();
    let mut out = Vec::new();
    let f = config.feature_dim();
    for (tick, st) in states.iter().enumerate().take(steps + 1) {
        let now = tick as f64 * config.dt;
        channel.push_state(st.clone(), now)?;
        for p in channel.poll_arrivals(now) {
            let mut feat = p.payload.stacked();
            feat.push(p.sampled_delay);
            let send = p.send_tick as usize;
            if send + h < states.len() {
                let mut win = Vec::with_capacity((config.window - 1) * f);
                for row in window.iter() {
                    win.extend_from_slice(row);
                }
                let mut future = Vec::with_capacity(h * config.state_dim());
                for s in &states[send + 1..=send + h] {
                    future.extend(s.stacked());
                }
                out.push(Sample { window: win, anchor: feat.clone(), future });
            }
            window.push_back(feat);
            while window.len() > config.window - 1 {
                window.pop_front();
            }
        }
    }
    Ok(out)
}

impl EstimatorNet {
    /// Scheduled-sampling rollout loss for one sample. `teacher[k]` (k = 1 … H−1)
    /// selects the ground truth instead of the prediction as the input to
    /// step k + 1. If `grad` is given, exact gradients are accumulated into it.
    pub fn sample_loss(&self, sample: &Sample, teacher: &[bool], grad: Option<&mut EstimatorNet>) -> f64 {
        let c = &self.config;
        let (s, f, h) = (c.state_dim(), c.feature_dim(), c.horizon);
        let alpha = self.alpha();
        let omega = sample.anchor[s];
        let norm = 1.0 / (h * s) as f64;
        let taped = grad.is_some();

        let mut state = self.lstm.zero_state();
        let mut enc_tapes = Vec::new();
        for row in sample.window.chunks(f) {
            let x = self.normalize_feature(&row[..s], row[s]);
            if taped {
                let (ns, t) = self.lstm.step_taped(&state, &x);
                enc_tapes.push(t);
                state = ns;
            } else {
                state = self.lstm.step(&state, &x);
            }
        }

        let gt = |k: usize| -> &[f64] {
            if k == 0 {
                &sample.anchor[..s]
            } else {
                &sample.future[(k - 1) * s..k * s]
            }
        };
        let mut preds: Vec<Vec<f64>> = Vec::with_capacity(h + 1);
        preds.push(sample.anchor[..s].to_vec());
        let mut vs = Vec::with_capacity(h);
        let mut tapes = Vec::with_capacity(h);
        let mut loss = 0.0;
        for k in 1..=h {
            let use_gt = k == 1 || teacher.get(k - 1).copied().unwrap_or(false);
            let base: Vec<f64> = if use_gt { gt(k - 1).to_vec() } else { preds[k - 1].clone() };
            let x = self.normalize_feature(&base, omega);
            let (raw, lt, ht) = if taped {
                let (ns, lt) = self.lstm.step_taped(&state, &x);
                state = ns;
                let (raw, ht) = self.head.forward_taped(&self.head_input(state.output(), &base), 1);
                (raw, Some(lt), Some(ht))
            } else {
                state = self.lstm.step(&state, &x);
                (self.head.forward(&self.head_input(state.output(), &base), 1), None, None)
            };
            let v: Vec<f64> = raw.iter().zip(&self.step_scale).map(|(r, sc)| r * sc).collect();
            let pred: Vec<f64> = base.iter().zip(&v).map(|(b, vi)| b + vi * alpha).collect();
            for i in 0..s {
                let e = (pred[i] - gt(k)[i]) / self.feature_std[i];
                loss += norm * e * e;
            }
            preds.push(pred);
            vs.push(v);
            tapes.push((lt, ht, use_gt));
        }

        let Some(grad) = grad else { return loss };
        let mut carry = self.lstm.zero_carry();
        // gradient w.r.t. preds[k] flowing back from later steps
        let mut d_next = vec![0.0; s];
        let mut d_log_alpha = 0.0;
        for k in (1..=h).rev() {
            let (lt, ht, use_gt) = tapes.pop().unwrap();
            let mut d_pred = core::mem::take(&mut d_next);
            for i in 0..s {
                let std2 = self.feature_std[i] * self.feature_std[i];
                d_pred[i] += 2.0 * norm * (preds[k][i] - gt(k)[i]) / std2;
            }
            // pred = base + α v
            let v = &vs[k - 1];
            let mut d_base = d_pred.clone();
            let mut d_raw = vec![0.0; s];
            for i in 0..s {
                d_log_alpha += d_pred[i] * v[i] * alpha;
                d_raw[i] = d_pred[i] * alpha * self.step_scale[i];
            }
            let d_hin = self.head.backward(ht.unwrap(), &d_raw, &mut grad.head);
            let nh = self.lstm.hidden_dim();
            for i in 0..s {
                d_base[i] += d_hin[nh + i] / self.feature_std[i];
            }
            let (dx, nc) = self.lstm.backward_step(lt.unwrap(), &d_hin[..nh], carry, &mut grad.lstm);
            carry = nc;
            for i in 0..s {
                d_base[i] += dx[i] / self.feature_std[i];
            }
            d_next = if use_gt { vec![0.0; s] } else { d_base };
        }
        for t in enc_tapes.into_iter().rev() {
            let zero = vec![0.0; self.lstm.hidden_dim()];
            let (_, nc) = self.lstm.backward_step(t, &zero, carry, &mut grad.lstm);
            carry = nc;
        }
        grad.log_alpha += d_log_alpha;
        loss
    }
}

/// Circular store of training samples; the oldest are overwritten.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    samples: Vec<Sample>,
    capacity: usize,
    cursor: usize,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { samples: Vec::new(), capacity: capacity.max(1), cursor: 0 }
    }

    pub fn push(&mut self, s: Sample) {
        if self.samples.len() < self.capacity {
            self.samples.push(s);
        } else {
            self.samples[self.cursor] = s;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<&Sample> {
        (0..n).map(|_| &self.samples[rng.random_range(0..self.samples.len())]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorTrainConfig {
    pub net: EstimatorConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_updates: usize,
    /// Multiplier applied to the teacher-forcing probability after every update.
    pub scheduled_sampling_decay: f64,
    pub buffer_capacity: usize,
    pub episode_seconds: f64,
    pub initial_episodes: usize,
    /// A fresh episode is simulated and added to the buffer every this many updates.
    pub collect_every: usize,
    pub validate_every: usize,
    pub validation_seconds: f64,
    pub grad_clip: f64,
    pub presets: Vec<String>,
    pub ranges: TrajectoryRanges,
    pub seed: u64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self {
            net: EstimatorConfig::default(),
            learning_rate: 1e-3,
            batch_size: 16,
            total_updates: 3000,
            scheduled_sampling_decay: 0.998,
            buffer_capacity: 8192,
            episode_seconds: 20.0,
            initial_episodes: 6,
            collect_every: 100,
            validate_every: 250,
            validation_seconds: 8.0,
            grad_clip: 10.0,
            presets: crate::delay::PRESET_NAMES.iter().map(|s| String::from(*s)).collect(),
            ranges: TrajectoryRanges::default(),
            seed: 0,
        }
    }
}

impl EstimatorTrainConfig {
    /// Teacher-forcing probability after `update` updates.
    pub fn teacher_forcing_probability(&self, update: usize) -> f64 {
        self.scheduled_sampling_decay.powi(update as i32).clamp(0.0, 1.0)
    }

    fn preset(&self, i: usize) -> Result<DelayConfig> {
        let name = &self.presets[i % self.presets.len()];
        DelayConfig::preset(name).ok_or_else(|| Error::InvalidParam(format!("unknown delay preset `{name}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub update: usize,
    pub loss: f64,
    pub teacher_forcing: f64,
    pub grad_norm: f64,
    /// Mean closed-loop error over the validation episodes, when validated.
    pub validation_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedEstimator {
    pub net: EstimatorNet,
    pub log: Vec<TrainLogEntry>,
    pub best_validation_error: f64,
    pub skipped_updates: u64,
}

/// Result of one closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    /// Mean ‖q̂_l − q_l‖ (rad) over ticks with an estimate.
    pub mean_error: f64,
    pub max_error: f64,
    /// Same metric for holding the latest packet.
    pub zoh_mean_error: f64,
    pub zoh_max_error: f64,
    pub samples: usize,
}

/// Runs the estimator against a simulated leader through a delay channel and
/// scores it with the simulator's ground truth.
pub fn closed_loop_validation(
    net: &Arc<EstimatorNet>,
    arm: &ArmParams,
    traj: &TrajectoryParams,
    delay: &DelayConfig,
    seed: u64,
    seconds: f64,
) -> Result<ValidationResult> {
    let dt = net.config.dt;
    let n = arm.n_links();
    let mut leader = Leader::new(arm.clone(), GainConfig::leader_default(n), LeaderDrive::Reference(traj.clone()), 0.0)?;
    let mut channel = DelayChannel::new(DelayConfig { dt, ..delay.clone() }, seed);
    let mut core = EstimatorCore::new(net.clone());
    let steps = to_ticks(seconds, dt).max(0) as usize;
    let (mut sum, mut max, mut zsum, mut zmax, mut count) = (0.0, 0.0f64, 0.0, 0.0f64, 0usize);
    for tick in 0..=steps {
        if tick > 0 {
            leader.step(dt)?;
        }
        let now = tick as f64 * dt;
        channel.push_state(leader.state.clone(), now)?;
        for p in channel.poll_arrivals(now) {
            core.ingest_packet(&p, now);
        }
        if let Ok(pred) = core.predict_now(now) {
            let e = dist(&pred.q, &leader.state.q);
            let ez = dist(&core.anchor().unwrap().payload.q, &leader.state.q);
            if !e.is_finite() {
                return Ok(ValidationResult { mean_error: f64::INFINITY, max_error: f64::INFINITY, zoh_mean_error: 0.0, zoh_max_error: 0.0, samples: count });
            }
            sum += e;
            max = max.max(e);
            zsum += ez;
            zmax = zmax.max(ez);
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(ValidationResult { mean_error: sum / c, max_error: max, zoh_mean_error: zsum / c, zoh_max_error: zmax, samples: count })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Validation episodes: one randomized figure-8 per preset on held-out seeds.
fn validation_score(net: &Arc<EstimatorNet>, arm: &ArmParams, cfg: &EstimatorTrainConfig, episodes: &[(TrajectoryParams, DelayConfig, u64)]) -> Result<f64> {
    let mut total = 0.0;
    for (traj, delay, seed) in episodes {
        total += closed_loop_validation(net, arm, traj, delay, *seed, cfg.validation_seconds)?.mean_error;
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// Online data collection plus scheduled-sampling training; keeps the
/// parameters with the best closed-loop validation score.
pub fn train_estimator(
    arm: &ArmParams,
    cfg: &EstimatorTrainConfig,
    progress: &mut dyn FnMut(&TrainLogEntry),
) -> Result<TrainedEstimator> {
    cfg.net.validate()?;
    if cfg.net.dof != arm.n_links() {
        return Err(Error::Dimension { expected: arm.n_links(), got: cfg.net.dof });
    }
    if cfg.presets.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidParam("estimator training needs presets and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let steps = to_ticks(cfg.episode_seconds, cfg.net.dt).max(1) as usize;
    let mut buffer = SampleBuffer::new(cfg.buffer_capacity);
    let mut episode = 0usize;
    let collect = |buffer: &mut SampleBuffer, data_rng: &mut ChaCha8Rng, episode: &mut usize| -> Result<()> {
        let traj = cfg.ranges.sample(data_rng, arm)?;
        let delay = cfg.preset(*episode)?;
        let seed = data_rng.random::<u64>();
        let mut samples = collect_samples(arm, &traj, &delay, seed, steps, &cfg.net)?;
        samples.shuffle(data_rng);
        for s in samples {
            buffer.push(s);
        }
        *episode += 1;
        Ok(())
    };
    for _ in 0..cfg.initial_episodes.max(1) {
        collect(&mut buffer, &mut data_rng, &mut episode)?;
    }

    let mut net = EstimatorNet::new(cfg.net.clone(), &mut rng);
    net.fit_scalings(buffer.as_slice());

    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a11_da7e);
    let mut val_eps = Vec::new();
    for i in 0..cfg.presets.len() {
        val_eps.push((cfg.ranges.sample(&mut val_rng, arm)?, cfg.preset(i)?, val_rng.random::<u64>()));
    }

    let mut adam = Adam::new(&net, AdamConfig::with_lr(cfg.learning_rate));
    let mut best = net.clone();
    best.quantize();
    let mut best_score = validation_score(&Arc::new(best.clone()), arm, cfg, &val_eps)?;
    let mut log = Vec::new();
    let h = cfg.net.horizon;
    for update in 0..cfg.total_updates {
        if update > 0 && cfg.collect_every > 0 && update % cfg.collect_every == 0 {
            collect(&mut buffer, &mut data_rng, &mut episode)?;
        }
        let p_tf = cfg.teacher_forcing_probability(update);
        let mut grad = net.zeros_like();
        let mut loss = 0.0;
        for s in buffer.sample(&mut rng, cfg.batch_size) {
            let teacher: Vec<bool> = (0..h).map(|_| rng.random::<f64>() < p_tf).collect();
            loss += net.sample_loss(s, &teacher, Some(&mut grad));
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grad.scale(inv);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { update, loss });
        }
        let grad_norm = grad.clip_global_norm(cfg.grad_clip);
        adam.update(&mut net, &grad);
        let mut entry = TrainLogEntry { update, loss, teacher_forcing: p_tf, grad_norm, validation_error: None };
        let last = update + 1 == cfg.total_updates;
        if (cfg.validate_every > 0 && (update + 1) % cfg.validate_every == 0) || last {
            let mut snap = net.clone();
            snap.quantize();
            let score = validation_score(&Arc::new(snap.clone()), arm, cfg, &val_eps)?;
            entry.validation_error = Some(score);
            if score < best_score {
                best_score = score;
                best = snap;
            }
        }
        progress(&entry);
        log.push(entry);
    }
    Ok(TrainedEstimator { net: best, log, best_validation_error: best_score, skipped_updates: adam.skipped })
}
