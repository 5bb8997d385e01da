//! Computed-torque control, the PD-on-delayed-observations baseline, and the
//! state-buffer predictor used by the PMDC-style baseline.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmParams, JointState};
use crate::delay::DelayedPacket;
use crate::nn::checkpoint::{round_to_f32, Checkpoint};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, Parameters};
use crate::trajectory::TrajectoryRanges;
use crate::{Error, Result};

/// Diagonal PD gains of the outer loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainConfig {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl GainConfig {
    pub fn uniform(n: usize, kp: f64, kd: f64) -> Self {
        Self { kp: vec![kp; n], kd: vec![kd; n] }
    }

    /// Follower gains. With the 52 ms actuation lag in the loop the phase
    /// margin is ≈ 17°; closing the loop through ω_o as well would make these unstable.
    pub fn follower_default(n: usize) -> Self {
        Self::uniform(n, 100.0, 20.0)
    }

    /// Leader gains; the leader has an undelayed local loop.
    pub fn leader_default(n: usize) -> Self {
        Self::uniform(n, 400.0, 40.0)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kp.len() != n || self.kd.len() != n {
            return Err(Error::Dimension { expected: n, got: self.kp.len().min(self.kd.len()) });
        }
        if self.kp.iter().chain(&self.kd).any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidParam("gains must be strictly positive".into()));
        }
        Ok(())
    }
}

/// q̈_ref = q̈̂_l + K_d (q̂̇_l − q̇_f) + K_p (q̂_l − q_f)
pub fn reference_accel(q_hat: &[f64], qdot_hat: &[f64], qddot_hat: &[f64], follower: &JointState, gains: &GainConfig) -> Vec<f64> {
    (0..q_hat.len())
        .map(|i| {
            qddot_hat[i] + gains.kd[i] * (qdot_hat[i] - follower.qdot[i]) + gains.kp[i] * (q_hat[i] - follower.q[i])
        })
        .collect()
}

/// τ = M(q_f) q̈_ref + C q̇_f + D q̇_f + g(q_f). Not clamped here.
pub fn computed_torque(params: &ArmParams, follower: &JointState, qddot_ref: &[f64]) -> Result<Vec<f64>> {
    let m = arm::mass_matrix(params, &follower.q)?;
    let mut tau = m.mul_vec(qddot_ref);
    for (t, b) in tau.iter_mut().zip(arm::bias_forces(params, follower)?) {
        *t += b;
    }
    Ok(tau)
}

/// Computed torque toward a held (possibly stale) leader state, without feedforward.
pub fn vanilla_pd_torque(params: &ArmParams, follower: &JointState, delayed_leader: &JointState, gains: &GainConfig) -> Result<Vec<f64>> {
    let zero = vec![0.0; delayed_leader.q.len()];
    let qdd = reference_accel(&delayed_leader.q, &delayed_leader.qdot, &zero, follower, gains);
    computed_torque(params, follower, &qdd)
}

/// Acceleration feedforward from consecutive velocity estimates, clamped.
pub fn finite_difference_accel(qdot_prev: &[f64], qdot_now: &[f64], dt: f64, limit: f64) -> Vec<f64> {
    qdot_now.iter().zip(qdot_prev).map(|(a, b)| ((a - b) / dt).clamp(-limit, limit)).collect()
}

pub const FEEDFORWARD_ACCEL_LIMIT: f64 = 20.0;

/// One-step leader model for the state-buffer predictor:
/// s_{k+1} = s_k + step_scale ⊙ mlp((s_k − mean) / std).
#[derive(Clone, Debug, PartialEq)]
pub struct SbspModel {
    pub mlp: Mlp,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub step_scale: Vec<f64>,
    pub trained: bool,
}

pub const SBSP_CHECKPOINT_KIND: &str = "sbsp";

impl SbspModel {
    pub fn new<R: Rng + ?Sized>(dof: usize, hidden: &[usize], rng: &mut R) -> Self {
        let s = 2 * dof;
        let mut dims = vec![s];
        dims.extend(hidden);
        dims.push(s);
        let mut mlp = Mlp::new(&dims, Activation::Relu, Activation::Identity, rng);
        mlp.scale_output_layer(0.1);
        Self { mlp, mean: vec![0.0; s], std: vec![1.0; s], step_scale: vec![1.0; s], trained: false }
    }

    pub fn state_dim(&self) -> usize {
        self.mean.len()
    }

    fn input(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((v, m), sd)| (v - m) / sd).collect()
    }

    /// Returns (increment, next state).
    pub fn step(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let raw = self.mlp.forward(&self.input(s), 1);
        let inc: Vec<f64> = raw.iter().zip(&self.step_scale).map(|(r, k)| r * k).collect();
        let next = s.iter().zip(&inc).map(|(a, b)| a + b).collect();
        (inc, next)
    }

    /// Mean squared normalized one-step error over `pairs` of (s_k, s_{k+1}).
    pub fn loss(&self, pairs: &[(&[f64], &[f64])], grad: Option<&mut Mlp>) -> f64 {
        let s = self.state_dim();
        let b = pairs.len();
        let mut x = Vec::with_capacity(b * s);
        let mut target = Vec::with_capacity(b * s);
        for (a, n) in pairs {
            x.extend(self.input(a));
            // regress the normalized increment directly
            target.extend((0..s).map(|i| (n[i] - a[i]) / self.step_scale[i]));
        }
        let norm = 1.0 / (b * s) as f64;
        let (out, tape) = self.mlp.forward_taped(&x, b);
        let mut loss = 0.0;
        let mut d = vec![0.0; out.len()];
        for i in 0..out.len() {
            let e = out[i] - target[i];
            loss += norm * e * e;
            d[i] = 2.0 * norm * e;
        }
        if let Some(g) = grad {
            self.mlp.backward(tape, &d, g);
        }
        loss
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(SBSP_CHECKPOINT_KIND);
        ck.put_mlp("model", &self.mlp);
        let s = self.state_dim();
        ck.push("mean", &[s], &self.mean);
        ck.push("std", &[s], &self.std);
        ck.push("step_scale", &[s], &self.step_scale);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(SBSP_CHECKPOINT_KIND)?;
        let mlp = ck.get_mlp("model")?;
        let s = mlp.in_dim();
        if mlp.out_dim() != s || s % 2 != 0 {
            return Err(Error::Checkpoint("state-buffer model must map a state to a state".into()));
        }
        Ok(Self { mlp, mean: ck.read("mean", &[s])?, std: ck.read("std", &[s])?, step_scale: ck.read("step_scale", &[s])?, trained: true })
    }

    pub fn quantize(&mut self) {
        round_to_f32(&mut self.mlp);
        for v in self.mean.iter_mut().chain(&mut self.std).chain(&mut self.step_scale) {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbspTrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub updates: usize,
    pub episodes: usize,
    pub episode_seconds: f64,
    pub ranges: TrajectoryRanges,
    pub seed: u64,
}

impl Default for SbspTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            learning_rate: 1e-3,
            batch_size: 64,
            updates: 3000,
            episodes: 6,
            episode_seconds: 20.0,
            ranges: TrajectoryRanges::default(),
            seed: 0,
        }
    }
}

/// Fits the one-step model on leader transitions from randomized figure-8 episodes.
pub fn train_sbsp(arm: &ArmParams, cfg: &SbspTrainConfig, dt: f64) -> Result<(SbspModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5b5b);
    let n = arm.n_links();
    let steps = crate::to_ticks(cfg.episode_seconds, dt).max(1) as usize;
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut pairs_idx = Vec::new();
    for _ in 0..cfg.episodes.max(1) {
        let traj = cfg.ranges.sample(&mut rng, arm)?;
        let ep = crate::trajectory::simulate_leader(arm, &traj, steps, dt)?;
        let base = states.len();
        states.extend(ep.iter().map(|s| s.stacked()));
        pairs_idx.extend(base..base + ep.len() - 1);
    }
    let mut model = SbspModel::new(n, &cfg.hidden, &mut rng);
    let s = 2 * n;
    let count = states.len() as f64;
    for i in 0..s {
        let m = states.iter().map(|v| v[i]).sum::<f64>() / count;
        let var = states.iter().map(|v| (v[i] - m) * (v[i] - m)).sum::<f64>() / count;
        model.mean[i] = m;
        model.std[i] = var.sqrt().max(1e-3);
        let dvar = pairs_idx.iter().map(|&k| (states[k + 1][i] - states[k][i]).powi(2)).sum::<f64>() / pairs_idx.len() as f64;
        model.step_scale[i] = dvar.sqrt().max(1e-6);
    }
    let mut adam = Adam::new(&model.mlp, AdamConfig::with_lr(cfg.learning_rate));
    let mut losses = Vec::with_capacity(cfg.updates);
    for u in 0..cfg.updates {
        let batch: Vec<(&[f64], &[f64])> = (0..cfg.batch_size)
            .map(|_| {
                let k = pairs_idx[rng.random_range(0..pairs_idx.len())];
                (states[k].as_slice(), states[k + 1].as_slice())
            })
            .collect();
        let mut g = model.mlp.zeros_like();
        let loss = model.loss(&batch, Some(&mut g));
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { update: u, loss });
        }
        g.clip_global_norm(10.0);
        adam.update(&mut model.mlp, &g);
        losses.push(loss);
    }
    model.trained = true;
    model.quantize();
    Ok((model, losses))
}

/// State-buffer predictor: rebuilt from each arrival up to the present, then
/// extended one model step per tick.
#[derive(Clone, Debug)]
pub struct SbspBuffer {
    model: Arc<SbspModel>,
    buffer: Vec<Vec<f64>>,
    last_increment: Option<Vec<f64>>,
    last_arrival_time: Option<f64>,
    /// Tick the buffer tail corresponds to.
    tail_tick: i64,
    dt: f64,
}

impl SbspBuffer {
    pub fn new(model: Arc<SbspModel>, dt: f64) -> Result<Self> {
        if !model.trained {
            return Err(Error::NotReady("state-buffer model is untrained"));
        }
        Ok(Self { model, buffer: Vec::new(), last_increment: None, last_arrival_time: None, tail_tick: 0, dt })
    }

    pub fn last_arrival_time(&self) -> Option<f64> {
        self.last_arrival_time
    }

    pub fn buffer(&self) -> &[Vec<f64>] {
        &self.buffer
    }

    /// Increment that produced the tail on the latest non-arrival tick.
    pub fn last_increment(&self) -> Option<&[f64]> {
        self.last_increment.as_deref()
    }

    /// Rebuilds the buffer from a fresh measurement, iterating up to `now`.
    pub fn on_arrival(&mut self, packet: &DelayedPacket, now: f64) {
        let now_tick = crate::to_ticks(now, self.dt);
        self.buffer.clear();
        self.buffer.push(packet.payload.stacked());
        for _ in packet.send_tick..now_tick {
            let (_, next) = self.model.step(self.buffer.last().unwrap());
            self.buffer.push(next);
        }
        self.tail_tick = now_tick.max(packet.send_tick);
        self.last_arrival_time = Some(now);
        self.last_increment = None;
    }

    /// Advances to `now` without a measurement, one model step per tick.
    pub fn on_tick(&mut self, now: f64) {
        let now_tick = crate::to_ticks(now, self.dt);
        while self.tail_tick < now_tick && !self.buffer.is_empty() {
            let (inc, next) = self.model.step(self.buffer.last().unwrap());
            self.buffer.push(next);
            self.last_increment = Some(inc);
            self.tail_tick += 1;
        }
    }

    /// Current estimate (q, q̇), or not-ready before the first arrival.
    pub fn predict(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let tail = self.buffer.last().ok_or(Error::NotReady("no leader packet received yet"))?;
        let n = tail.len() / 2;
        Ok((tail[..n].to_vec(), tail[n..].to_vec()))
    }
}

/// Classifies consecutive estimator outputs as smooth continuations or jumps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuityMonitor {
    #[serde(skip)]
    prev: Option<Vec<f64>>,
    /// Ticks where the output differed from previous + model increment.
    pub within_epoch_jumps: usize,
    pub max_within_epoch_jump: f64,
    /// ‖Δ output‖ at every tick with a new anchor.
    pub arrival_jumps: Vec<f64>,
    pub ticks: usize,
}

impl ContinuityMonitor {
    /// `increment` is what the predictor itself added this tick (None = hold);
    /// `arrival` marks a tick where the predictor was re-anchored.
    pub fn record(&mut self, output: &[f64], increment: Option<&[f64]>, arrival: bool) {
        self.ticks += 1;
        if let Some(prev) = &self.prev {
            if arrival {
                self.arrival_jumps.push(crate::linalg::norm(&crate::linalg::sub(output, prev)));
            } else {
                let mut jump = 0.0;
                let mut exact = true;
                for i in 0..output.len() {
                    let expected = match increment {
                        Some(d) => prev[i] + d[i],
                        None => prev[i],
                    };
                    if output[i] != expected {
                        exact = false;
                    }
                    jump += (output[i] - expected) * (output[i] - expected);
                }
                if !exact {
                    self.within_epoch_jumps += 1;
                    self.max_within_epoch_jump = self.max_within_epoch_jump.max(jump.sqrt());
                }
            }
        }
        self.prev = Some(output.to_vec());
    }

    pub fn max_arrival_jump(&self) -> f64 {
        self.arrival_jumps.iter().cloned().fold(0.0, f64::max)
    }
}
