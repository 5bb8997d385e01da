//! Soft actor-critic for the residual torque: squashed-Gaussian actor, twin
//! critics with Polyak-averaged targets, learned temperature.
//!
//! Actions are stored post-squash in physical units (N·m). Networks see the
//! observation normalized by statistics fitted on the initial random fill and
//! the action divided by a_max.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::delay::DelayConfig;
use crate::env::{EnvConfig, Method, TeleopEnv, TrajectoryMode};
use crate::estimator::EstimatorNet;
use crate::nn::checkpoint::round_to_f32;
use crate::nn::{polyak_update, Activation, Adam, AdamConfig, Checkpoint, Mlp, Parameters, Scalar};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "policy";
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = core::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Uniform-random actions before learning starts.
    pub initial_random_steps: usize,
    /// Half-width of the random fill as a fraction of a_max.
    pub initial_action_scale: f64,
    /// Critic-only updates before the actor and temperature start moving.
    pub critic_warmup_updates: usize,
    pub total_steps: usize,
    pub init_temperature: f64,
    /// Defaults to −n.
    pub target_entropy: Option<f64>,
    pub validate_every: usize,
    /// Rollouts per delay setting at each validation.
    pub validation_episodes: usize,
    pub validation_seconds: f64,
    pub grad_clip: f64,
    /// L2 weight on the actor's pre-squash mean and log-std; keeps the
    /// policy out of the flat tanh tails.
    pub actor_reg: f64,
    pub seed: u64,
}

impl Default for SacConfig {
    /// Desk preset: small networks, 3e-4 body learning rates.
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 64,
            buffer_capacity: 200_000,
            initial_random_steps: 5_000,
            initial_action_scale: 0.1,
            critic_warmup_updates: 5_000,
            total_steps: 100_000,
            init_temperature: 0.1,
            target_entropy: None,
            validate_every: 10_000,
            validation_episodes: 1,
            validation_seconds: 10.0,
            grad_clip: 100.0,
            actor_reg: 1e-3,
            seed: 0,
        }
    }
}

impl SacConfig {
    /// The published hyperparameters (slow body learning rates, 3e6 steps).
    pub fn paper() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 3e-5,
            critic_lr: 3e-5,
            temperature_lr: 3e-4,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            initial_random_steps: 10_000,
            total_steps: 3_000_000,
            validate_every: 50_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.buffer_capacity >= self.batch_size
            && (0.0..=1.0).contains(&self.gamma)
            && self.tau > 0.0
            && self.tau <= 1.0
            && self.init_temperature > 0.0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.temperature_lr > 0.0
            && self.initial_action_scale > 0.0
            && self.initial_action_scale <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam("inconsistent SAC configuration".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacParams {
    /// obs → [μ (n), log σ (n)].
    pub actor: Mlp,
    /// obs ⊕ a/a_max → Q.
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_temperature: f64,
    pub target_entropy: f64,
    pub a_max: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

impl SacParams {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, a_max: Vec<f64>, hidden: &[usize], init_temperature: f64, rng: &mut R) -> Self {
        let n = a_max.len();
        let dims = |i: usize, o: usize| {
            let mut d = vec![i];
            d.extend_from_slice(hidden);
            d.push(o);
            d
        };
        let mut actor = Mlp::new(&dims(obs_dim, 2 * n), Activation::Relu, Activation::Identity, rng);
        actor.scale_output_layer(0.1);
        // μ rows start at exactly zero: the untrained residual is the nominal controller
        let head = actor.layers.last_mut().unwrap();
        let width = head.in_dim;
        head.weight[..n * width].fill(0.0);
        head.bias[..n].fill(0.0);
        let critic1 = Mlp::new(&dims(obs_dim + n, 1), Activation::Relu, Activation::Identity, rng);
        let critic2 = Mlp::new(&dims(obs_dim + n, 1), Activation::Relu, Activation::Identity, rng);
        Self {
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_temperature: init_temperature.ln(),
            target_entropy: -(n as f64),
            a_max,
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.a_max.len()
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().zip(self.obs_mean.iter().zip(&self.obs_std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    /// Per-feature mean/std; near-constant features keep unit scale.
    pub fn fit_normalization<'a>(&mut self, observations: impl Iterator<Item = &'a [f64]>) {
        let d = self.obs_dim();
        let (mut sum, mut sq, mut count) = (vec![0.0; d], vec![0.0; d], 0usize);
        for o in observations {
            for i in 0..d {
                sum[i] += o[i];
                sq[i] += o[i] * o[i];
            }
            count += 1;
        }
        if count == 0 {
            return;
        }
        for i in 0..d {
            let m = sum[i] / count as f64;
            let var = (sq[i] / count as f64 - m * m).max(0.0);
            self.obs_mean[i] = m;
            self.obs_std[i] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
    }

    fn critic_input(&self, obs_norm: &[f64], action: &[f64], batch: usize) -> Vec<f64> {
        let (d, n) = (self.obs_dim(), self.action_dim());
        let mut x = Vec::with_capacity(batch * (d + n));
        for b in 0..batch {
            x.extend_from_slice(&obs_norm[b * d..(b + 1) * d]);
            x.extend(action[b * n..(b + 1) * n].iter().zip(&self.a_max).map(|(a, m)| a / m));
        }
        x
    }

    /// Deterministic action a_max·tanh(μ).
    pub fn act_deterministic(&self, obs: &[f64]) -> Vec<f64> {
        let out = self.actor.forward(&self.normalize(obs), 1);
        (0..self.action_dim()).map(|i| self.a_max[i] * out[i].tanh()).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.put_mlp("actor", &self.actor);
        ck.put_mlp("critic1", &self.critic1);
        ck.put_mlp("critic2", &self.critic2);
        ck.put_mlp("target1", &self.target1);
        ck.put_mlp("target2", &self.target2);
        ck.push("log_temperature", &[1], &[self.log_temperature]);
        ck.push("target_entropy", &[1], &[self.target_entropy]);
        ck.push("a_max", &[self.a_max.len()], &self.a_max);
        ck.push("obs_mean", &[self.obs_mean.len()], &self.obs_mean);
        ck.push("obs_std", &[self.obs_std.len()], &self.obs_std);
        ck.set_attr("obs_dim", self.obs_dim());
        ck.set_attr("action_dim", self.action_dim());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let d: usize = ck.attr_parse("obs_dim")?;
        let n: usize = ck.attr_parse("action_dim")?;
        let p = Self {
            actor: ck.get_mlp("actor")?,
            critic1: ck.get_mlp("critic1")?,
            critic2: ck.get_mlp("critic2")?,
            target1: ck.get_mlp("target1")?,
            target2: ck.get_mlp("target2")?,
            log_temperature: ck.read("log_temperature", &[1])?[0],
            target_entropy: ck.read("target_entropy", &[1])?[0],
            a_max: ck.read("a_max", &[n])?,
            obs_mean: ck.read("obs_mean", &[d])?,
            obs_std: ck.read("obs_std", &[d])?,
        };
        if p.actor.in_dim() != d || p.actor.out_dim() != 2 * n || p.critic1.in_dim() != d + n {
            return Err(Error::Checkpoint("policy network shapes do not match attributes".to_string()));
        }
        Ok(p)
    }

    /// Rounds everything to f32 so in-memory and reloaded policies act identically.
    pub fn quantize(&mut self) {
        for m in [&mut self.actor, &mut self.critic1, &mut self.critic2, &mut self.target1, &mut self.target2] {
            round_to_f32(m);
        }
        for v in [&mut self.log_temperature, &mut self.target_entropy] {
            *v = *v as f32 as f64;
        }
        for v in self.a_max.iter_mut().chain(self.obs_mean.iter_mut()).chain(self.obs_std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// One draw from the squashed Gaussian, with what the gradients need.
#[derive(Clone, Debug)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub u: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// log σ before the clamp; gradients through clamped entries are zero.
    pub log_std_raw: Vec<f64>,
    pub eps: Vec<f64>,
}

/// log(1 − tanh²u), stable for large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - crate::nn::softplus(-2.0 * u))
}

/// Squashes the raw actor head `[μ, log σ]` with fixed noise `eps`.
pub fn squash(head: &[f64], eps: &[f64], a_max: &[f64]) -> SquashedSample {
    let n = a_max.len();
    let mean = head[..n].to_vec();
    let log_std_raw = head[n..2 * n].to_vec();
    let log_std: Vec<f64> = log_std_raw.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    let mut u = vec![0.0; n];
    let mut action = vec![0.0; n];
    let mut log_prob = 0.0;
    for i in 0..n {
        u[i] = mean[i] + log_std[i].exp() * eps[i];
        action[i] = a_max[i] * u[i].tanh();
        log_prob += -0.5 * eps[i] * eps[i] - log_std[i] - HALF_LOG_2PI - a_max[i].ln() - log_one_minus_tanh_sq(u[i]);
    }
    SquashedSample { action, log_prob, u, mean, log_std, log_std_raw, eps: eps.to_vec() }
}

/// Samples an action for one observation (stochastic unless `deterministic`).
pub fn actor_sample<R: Rng + ?Sized>(params: &SacParams, obs: &[f64], rng: &mut R, deterministic: bool) -> SquashedSample {
    let head = params.actor.forward(&params.normalize(obs), 1);
    let n = params.action_dim();
    let eps: Vec<f64> = if deterministic { vec![0.0; n] } else { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    squash(&head, &eps, &params.a_max)
}

/// ∂(log π)/∂(μ, log σ) and ∂a/∂(μ, log σ) for one sample, per action dim.
fn squash_grads(s: &SquashedSample, a_max: &[f64]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let n = a_max.len();
    let mut dlogp = Vec::with_capacity(n);
    let mut da = Vec::with_capacity(n);
    for i in 0..n {
        let t = s.u[i].tanh();
        let sigma = s.log_std[i].exp();
        let live = s.log_std_raw[i] > LOG_STD_MIN && s.log_std_raw[i] < LOG_STD_MAX;
        let du_dls = if live { sigma * s.eps[i] } else { 0.0 };
        let dls_direct = if live { -1.0 } else { 0.0 };
        dlogp.push([2.0 * t, dls_direct + 2.0 * t * du_dls]);
        let dadu = a_max[i] * (1.0 - t * t);
        da.push([dadu, dadu * du_dls]);
    }
    (dlogp, da)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Post-squash, physical units.
    pub action: Vec<f64>,
    /// Already clipped by the environment.
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Genuine terminal only; horizon truncation stores false.
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
    /// Transitions refused because their observation was built during warm-up.
    pub rejected_warm_up: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), data: Vec::new(), cursor: 0, rejected_warm_up: 0 }
    }

    /// Stores `t` unless `obs_warm_up`; returns whether it was stored.
    pub fn push(&mut self, t: Transition, obs_warm_up: bool) -> bool {
        if obs_warm_up {
            self.rejected_warm_up += 1;
            return false;
        }
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        true
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.data
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<&Transition> {
        (0..n).map(|_| &self.data[rng.random_range(0..self.data.len())]).collect()
    }
}

/// Soft Bellman targets y = r + γ(1 − d)(min Q̄(s′, a′) − T·log π(a′|s′)),
/// with a′ drawn by the current actor using the supplied noise rows.
pub fn critic_targets(params: &SacParams, batch: &[&Transition], next_eps: &[Vec<f64>], temperature: f64, gamma: f64) -> Vec<f64> {
    let b = batch.len();
    let next_norm: Vec<f64> = batch.iter().flat_map(|t| params.normalize(&t.next_obs)).collect();
    let heads = params.actor.forward(&next_norm, b);
    let width = 2 * params.action_dim();
    let samples: Vec<SquashedSample> = (0..b).map(|i| squash(&heads[i * width..(i + 1) * width], &next_eps[i], &params.a_max)).collect();
    let actions: Vec<f64> = samples.iter().flat_map(|s| s.action.iter().copied()).collect();
    let x = params.critic_input(&next_norm, &actions, b);
    let q1 = params.target1.forward(&x, b);
    let q2 = params.target2.forward(&x, b);
    (0..b)
        .map(|i| {
            let t = batch[i];
            if t.done || gamma == 0.0 {
                t.reward
            } else {
                t.reward + gamma * (q1[i].min(q2[i]) - temperature * samples[i].log_prob)
            }
        })
        .collect()
}

/// Σ over both critics of mean (Q_i − y)²; gradients accumulate into `grads`.
pub fn critic_loss(params: &SacParams, batch: &[&Transition], y: &[f64], grads: Option<(&mut Mlp, &mut Mlp)>) -> f64 {
    let b = batch.len();
    let obs: Vec<f64> = batch.iter().flat_map(|t| params.normalize(&t.obs)).collect();
    let act: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().copied()).collect();
    let x = params.critic_input(&obs, &act, b);
    let (q1, tape1) = params.critic1.forward_taped(&x, b);
    let (q2, tape2) = params.critic2.forward_taped(&x, b);
    let mut loss = 0.0;
    let mut d1 = vec![0.0; b];
    let mut d2 = vec![0.0; b];
    for i in 0..b {
        let (e1, e2) = (q1[i] - y[i], q2[i] - y[i]);
        loss += (e1 * e1 + e2 * e2) / b as f64;
        d1[i] = 2.0 * e1 / b as f64;
        d2[i] = 2.0 * e2 / b as f64;
    }
    if let Some((g1, g2)) = grads {
        params.critic1.backward(tape1, &d1, g1);
        params.critic2.backward(tape2, &d2, g2);
    }
    loss
}

/// mean[T·log π(ã|s) − min Q(s, ã) + (reg/2)·Σ(μ² + log σ²)] with ã
/// reparameterized from `eps`. Returns (loss, mean log π).
pub fn actor_loss(params: &SacParams, batch: &[&Transition], eps: &[Vec<f64>], temperature: f64, reg: f64, grad: Option<&mut Mlp>) -> (f64, f64) {
    let b = batch.len();
    let n = params.action_dim();
    let d = params.obs_dim();
    let obs: Vec<f64> = batch.iter().flat_map(|t| params.normalize(&t.obs)).collect();
    let (heads, actor_tape) = params.actor.forward_taped(&obs, b);
    let samples: Vec<SquashedSample> = (0..b).map(|i| squash(&heads[i * 2 * n..(i + 1) * 2 * n], &eps[i], &params.a_max)).collect();
    let actions: Vec<f64> = samples.iter().flat_map(|s| s.action.iter().copied()).collect();
    let x = params.critic_input(&obs, &actions, b);
    let (q1, t1) = params.critic1.forward_taped(&x, b);
    let (q2, t2) = params.critic2.forward_taped(&x, b);
    let mut loss = 0.0;
    let mut mean_logp = 0.0;
    let mut dq1 = vec![0.0; b];
    let mut dq2 = vec![0.0; b];
    for i in 0..b {
        let use1 = q1[i] <= q2[i];
        let q = if use1 { q1[i] } else { q2[i] };
        let pen: f64 = samples[i].mean.iter().chain(&samples[i].log_std_raw).map(|v| v * v).sum();
        loss += (temperature * samples[i].log_prob - q + 0.5 * reg * pen) / b as f64;
        mean_logp += samples[i].log_prob / b as f64;
        if use1 {
            dq1[i] = -1.0 / b as f64;
        } else {
            dq2[i] = -1.0 / b as f64;
        }
    }
    if let Some(g) = grad {
        // dQ/da through the critics; their own gradients are discarded
        let mut scratch1 = params.critic1.zeros_like();
        let mut scratch2 = params.critic2.zeros_like();
        let dx1 = params.critic1.backward(t1, &dq1, &mut scratch1);
        let dx2 = params.critic2.backward(t2, &dq2, &mut scratch2);
        let mut dhead = vec![0.0; b * 2 * n];
        for i in 0..b {
            let (dlogp, da) = squash_grads(&samples[i], &params.a_max);
            for j in 0..n {
                let col = i * (d + n) + d + j;
                let dl_da = (dx1[col] + dx2[col]) / params.a_max[j];
                let w = temperature / b as f64;
                let r = reg / b as f64;
                dhead[i * 2 * n + j] = w * dlogp[j][0] + dl_da * da[j][0] + r * samples[i].mean[j];
                dhead[i * 2 * n + n + j] = w * dlogp[j][1] + dl_da * da[j][1] + r * samples[i].log_std_raw[j];
            }
        }
        params.actor.backward(actor_tape, &dhead, g);
    }
    (loss, mean_logp)
}

/// −log T·(mean log π + H̄) and its derivative in log T.
pub fn temperature_loss(log_temperature: f64, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
    let g = -(mean_log_prob + target_entropy);
    (log_temperature * g, g)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    pub mean_log_prob: f64,
    pub skipped: bool,
}

/// Optimizer state for one agent.
#[derive(Clone, Debug)]
pub struct SacOptimizers {
    pub actor: Adam,
    pub critic1: Adam,
    pub critic2: Adam,
    pub temperature: Adam,
    pub skipped_updates: usize,
    /// Completed (non-skipped) updates.
    pub updates: usize,
}

impl SacOptimizers {
    pub fn new(params: &SacParams, cfg: &SacConfig) -> Self {
        Self {
            actor: Adam::new(&params.actor, AdamConfig::with_lr(cfg.actor_lr)),
            critic1: Adam::new(&params.critic1, AdamConfig::with_lr(cfg.critic_lr)),
            critic2: Adam::new(&params.critic2, AdamConfig::with_lr(cfg.critic_lr)),
            temperature: Adam::new(&Scalar([0.0]), AdamConfig::with_lr(cfg.temperature_lr)),
            skipped_updates: 0,
            updates: 0,
        }
    }
}

/// One gradient step for critics, actor and temperature, then Polyak targets.
/// A non-finite loss or gradient skips the whole step.
pub fn sac_update<R: Rng + ?Sized>(
    params: &mut SacParams,
    opt: &mut SacOptimizers,
    replay: &ReplayBuffer,
    cfg: &SacConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    if replay.len() < cfg.batch_size {
        return Err(Error::NotReady("replay holds fewer transitions than one batch"));
    }
    let n = params.action_dim();
    let batch = replay.sample(rng, cfg.batch_size);
    let mut noise = || -> Vec<Vec<f64>> { (0..batch.len()).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect() };
    let next_eps = noise();
    let eps = noise();
    let temperature = params.temperature();

    let y = critic_targets(params, &batch, &next_eps, temperature, cfg.gamma);
    let mut g1 = params.critic1.zeros_like();
    let mut g2 = params.critic2.zeros_like();
    let c_loss = critic_loss(params, &batch, &y, Some((&mut g1, &mut g2)));
    let mut ga = params.actor.zeros_like();
    let (a_loss, mean_logp) = actor_loss(params, &batch, &eps, temperature, cfg.actor_reg, Some(&mut ga));
    let (t_loss, t_grad) = temperature_loss(params.log_temperature, mean_logp, params.target_entropy);

    let finite = c_loss.is_finite() && a_loss.is_finite() && t_loss.is_finite() && g1.all_finite() && g2.all_finite() && ga.all_finite();
    if !finite {
        opt.skipped_updates += 1;
        return Ok(UpdateReport { critic_loss: c_loss, actor_loss: a_loss, temperature, mean_log_prob: mean_logp, skipped: true });
    }
    for g in [&mut g1, &mut g2, &mut ga] {
        g.clip_global_norm(cfg.grad_clip);
    }
    opt.critic1.update(&mut params.critic1, &g1);
    opt.critic2.update(&mut params.critic2, &g2);
    if opt.updates >= cfg.critic_warmup_updates {
        opt.actor.update(&mut params.actor, &ga);
        let mut lt = Scalar([params.log_temperature]);
        opt.temperature.update(&mut lt, &Scalar([t_grad]));
        params.log_temperature = lt.0[0];
    }
    opt.updates += 1;
    polyak_update(&mut params.target1, &params.critic1, cfg.tau);
    polyak_update(&mut params.target2, &params.critic2, cfg.tau);
    Ok(UpdateReport { critic_loss: c_loss, actor_loss: a_loss, temperature: params.temperature(), mean_log_prob: mean_logp, skipped: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean deterministic validation return.
    pub validation_return: f64,
    /// Mean undiscounted return of the most recent training episodes.
    pub train_return: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub params: SacParams,
    pub curve: Vec<CurvePoint>,
    pub best_validation_return: f64,
    pub skipped_updates: usize,
    pub rejected_warm_up: usize,
    pub stored_transitions: usize,
}

/// Validation seeds never collide with training episode seeds.
pub const VALIDATION_SEED_BASE: u64 = 0xA11D_0000;

/// Mean deterministic return over `episodes` fixed-seed rollouts per delay setting.
pub fn validation_return(params: &SacParams, env_cfg: &EnvConfig, delays: &[DelayConfig], net: &Arc<EstimatorNet>, episodes: usize, seconds: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for delay in delays {
        let cfg = EnvConfig { episode_seconds: seconds, delay: delay.clone(), ..env_cfg.clone() };
        let mut env = TeleopEnv::new(cfg, Method::DrRl, Some(net.clone()), None)?;
        for e in 0..episodes {
            let mut obs = env.reset(VALIDATION_SEED_BASE + e as u64)?;
            loop {
                let a = params.act_deterministic(&obs.values);
                let r = env.step(&a)?;
                total += r.reward;
                obs = r.observation;
                if r.done {
                    break;
                }
            }
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Trains the residual policy on DR-RL episodes with the estimator frozen.
/// Episodes cycle through `delays` (the configured env delay if empty).
pub fn train_policy(
    env_cfg: &EnvConfig,
    delays: &[DelayConfig],
    net: Arc<EstimatorNet>,
    cfg: &SacConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainedPolicy> {
    cfg.validate()?;
    env_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let delays: Vec<DelayConfig> = if delays.is_empty() { vec![env_cfg.delay.clone()] } else { delays.to_vec() };
    let mut envs = delays
        .iter()
        .map(|d| TeleopEnv::new(EnvConfig { delay: d.clone(), ..env_cfg.clone() }, Method::DrRl, Some(net.clone()), None))
        .collect::<Result<Vec<_>>>()?;
    let a_max = env_cfg.a_max();
    let mut params = SacParams::new(env_cfg.obs_dim(), a_max.clone(), &cfg.hidden, cfg.init_temperature, &mut rng);
    if let Some(h) = cfg.target_entropy {
        params.target_entropy = h;
    }
    let mut opt = SacOptimizers::new(&params, cfg);
    let mut replay = ReplayBuffer::new(cfg.buffer_capacity);

    let mut episode = 0u64;
    let mut active = 0usize;
    let mut obs = envs[active].reset(cfg.seed.wrapping_mul(1_000_003))?;
    let mut ep_return = 0.0;
    let mut recent_returns: Vec<f64> = Vec::new();
    let mut last = UpdateReport::default();
    let mut curve = Vec::new();
    let mut best: Option<(f64, SacParams)> = None;
    let mut normalized = false;

    for step in 1..=cfg.total_steps {
        let action = if step <= cfg.initial_random_steps {
            a_max.iter().map(|m| {
                let w = m * cfg.initial_action_scale;
                rng.random_range(-w..w)
            }).collect()
        } else {
            actor_sample(&params, &obs.values, &mut rng, false).action
        };
        let r = envs[active].step(&action)?;
        ep_return += r.reward;
        replay.push(
            Transition { obs: obs.values.clone(), action, reward: r.reward, next_obs: r.observation.values.clone(), done: r.terminated },
            obs.warm_up,
        );
        obs = r.observation;
        if r.done {
            recent_returns.push(ep_return);
            if recent_returns.len() > 10 {
                recent_returns.remove(0);
            }
            ep_return = 0.0;
            episode += 1;
            active = episode as usize % envs.len();
            obs = envs[active].reset(cfg.seed.wrapping_mul(1_000_003).wrapping_add(episode))?;
        }

        if step >= cfg.initial_random_steps && replay.len() >= cfg.batch_size {
            if !normalized {
                params.fit_normalization(replay.as_slice().iter().map(|t| t.obs.as_slice()));
                normalized = true;
                // baseline: the untrained (near-zero) residual
                let mut candidate = params.clone();
                candidate.quantize();
                let v = validation_return(&candidate, env_cfg, &delays, &net, cfg.validation_episodes, cfg.validation_seconds)?;
                let point = CurvePoint { step, validation_return: v, train_return: f64::NAN, critic_loss: f64::NAN, actor_loss: f64::NAN, temperature: params.temperature() };
                progress(&point);
                curve.push(point);
                best = Some((v, candidate));
            }
            last = sac_update(&mut params, &mut opt, &replay, cfg, &mut rng)?;
        }

        let due = step % cfg.validate_every.max(1) == 0 || step == cfg.total_steps;
        if due && curve.last().map_or(true, |p: &CurvePoint| p.step != step) {
            let mut candidate = params.clone();
            candidate.quantize();
            let v = validation_return(&candidate, env_cfg, &delays, &net, cfg.validation_episodes, cfg.validation_seconds)?;
            let train_return = if recent_returns.is_empty() { f64::NAN } else { recent_returns.iter().sum::<f64>() / recent_returns.len() as f64 };
            let point = CurvePoint {
                step,
                validation_return: v,
                train_return,
                critic_loss: last.critic_loss,
                actor_loss: last.actor_loss,
                temperature: params.temperature(),
            };
            progress(&point);
            curve.push(point);
            if best.as_ref().map_or(true, |(b, _)| v > *b) {
                best = Some((v, candidate));
            }
        }
    }
    let (best_validation_return, params) = best.ok_or(Error::NotReady("no validation was run"))?;
    Ok(TrainedPolicy {
        params,
        curve,
        best_validation_return,
        skipped_updates: opt.skipped_updates,
        rejected_warm_up: replay.rejected_warm_up,
        stored_transitions: replay.len(),
    })
}

/// Environment configuration used for policy training: randomized figure-8s.
pub fn training_env_config(base: &EnvConfig) -> EnvConfig {
    let mut cfg = base.clone();
    if matches!(cfg.trajectory, TrajectoryMode::Benchmark) {
        cfg.trajectory = TrajectoryMode::Randomized(Default::default());
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(obs_dim: usize, n: usize, seed: u64) -> SacParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SacParams::new(obs_dim, vec![1.5; n], &[5], 0.3, &mut rng);
        // targets differ from online critics so both paths are exercised
        p.target1 = Mlp::new(&[obs_dim + n, 5, 1], Activation::Tanh, Activation::Identity, &mut rng);
        p.target2 = Mlp::new(&[obs_dim + n, 5, 1], Activation::Tanh, Activation::Identity, &mut rng);
        p.actor = Mlp::new(&[obs_dim, 5, 2 * n], Activation::Tanh, Activation::Identity, &mut rng);
        p.critic1 = Mlp::new(&[obs_dim + n, 5, 1], Activation::Tanh, Activation::Identity, &mut rng);
        p.critic2 = Mlp::new(&[obs_dim + n, 5, 1], Activation::Tanh, Activation::Identity, &mut rng);
        p.obs_mean = (0..obs_dim).map(|i| 0.1 * i as f64).collect();
        p.obs_std = (0..obs_dim).map(|i| 1.0 + 0.2 * i as f64).collect();
        p
    }

    fn batch(obs_dim: usize, n: usize, b: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|i| Transition {
                obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..n).map(|_| rng.random_range(-1.4..1.4)).collect(),
                reward: rng.random_range(-2.0..1.0),
                next_obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: i % 3 == 0,
            })
            .collect()
    }

    fn noise(b: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn load(m: &mut Mlp, theta: &[f64]) {
        for (i, v) in theta.iter().enumerate() {
            m.set_flat(i, *v);
        }
    }

    fn fd_check<F: Fn(&[f64]) -> f64>(theta: &[f64], analytic: &[f64], f: F) {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut p = theta.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let dn = f(&p);
            let num = (up - dn) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / (num.abs() + analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative FD mismatch {worst:e}");
    }

    #[test]
    fn fresh_actor_has_zero_deterministic_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = SacParams::new(5, vec![2.0, 1.0], &[8, 8], 0.1, &mut rng);
        for _ in 0..20 {
            let obs: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(p.act_deterministic(&obs), vec![0.0, 0.0]);
        }
        // the log-std rows are live, so exploration is not degenerate
        assert!(p.actor.layers.last().unwrap().weight[2 * 8..].iter().any(|w| *w != 0.0));
    }

    #[test]
    fn log_prob_closed_form() {
        let s = squash(&[0.0, 0.0], &[0.0], &[1.0]);
        assert_eq!(s.action, vec![0.0]);
        assert!((s.log_prob - -0.918_938_533_204_672_8).abs() < 1e-12, "{}", s.log_prob);
        // oracle via the naive formula at a moderate point
        let (mu, ls, e, m) = (0.3_f64, -0.4_f64, 0.7_f64, 2.5_f64);
        let s = squash(&[mu, ls], &[e], &[m]);
        let u = mu + ls.exp() * e;
        let naive = -0.5 * e * e - ls - 0.5 * (2.0 * core::f64::consts::PI).ln() - (m * (1.0 - u.tanh().powi(2))).ln();
        assert!((s.log_prob - naive).abs() < 1e-12);
        assert!((s.action[0] - m * u.tanh()).abs() < 1e-15);
    }

    #[test]
    fn actions_stay_inside_bounds_and_deterministic_mode_is_tanh_mean() {
        let p = tiny(4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s = actor_sample(&p, &obs, &mut rng, false);
            assert!(s.action.iter().zip(&p.a_max).all(|(a, m)| a.abs() <= *m));
            assert!(s.log_std.iter().all(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)));
            let d = actor_sample(&p, &obs, &mut rng, true);
            assert_eq!(d.action, p.act_deterministic(&obs));
            assert_eq!(d.action[0], p.a_max[0] * d.mean[0].tanh());
        }
    }

    #[test]
    fn critic_targets_edge_cases_and_manual_recomputation() {
        let p = tiny(3, 1, 3);
        let mut b = batch(3, 1, 2, 4);
        b[0].done = false;
        b[1].done = true;
        let refs: Vec<&Transition> = b.iter().collect();
        let eps = noise(2, 1, 5);
        let y = critic_targets(&p, &refs, &eps, 0.2, 0.9);
        assert_eq!(y[1], b[1].reward);
        let y0 = critic_targets(&p, &refs, &eps, 0.2, 0.0);
        assert_eq!(y0, vec![b[0].reward, b[1].reward]);

        // step-by-step recomputation for the non-terminal row
        let on: Vec<f64> = b[0].next_obs.iter().enumerate().map(|(i, x)| (x - p.obs_mean[i]) / p.obs_std[i]).collect();
        let head = p.actor.forward(&on, 1);
        let sigma = head[1].clamp(-20.0, 2.0).exp();
        let u = head[0] + sigma * eps[0][0];
        let a = 1.5 * u.tanh();
        let logp = -0.5 * eps[0][0].powi(2) - head[1].clamp(-20.0, 2.0) - 0.5 * (2.0 * core::f64::consts::PI).ln() - (1.5 * (1.0 - u.tanh().powi(2))).ln();
        let mut x = on.clone();
        x.push(a / 1.5);
        let q = p.target1.forward(&x, 1)[0].min(p.target2.forward(&x, 1)[0]);
        let manual = b[0].reward + 0.9 * (q - 0.2 * logp);
        assert!((y[0] - manual).abs() < 1e-6, "{} vs {}", y[0], manual);

        // swapping the twins changes nothing
        let mut swapped = p.clone();
        core::mem::swap(&mut swapped.target1, &mut swapped.target2);
        assert_eq!(critic_targets(&swapped, &refs, &eps, 0.2, 0.9), y);
    }

    #[test]
    fn entropy_term_grows_with_temperature() {
        let p = tiny(3, 2, 6);
        let b = batch(3, 2, 8, 7);
        let refs: Vec<&Transition> = b.iter().collect();
        let eps = noise(8, 2, 8);
        let lo = critic_targets(&p, &refs, &eps, 0.1, 0.99);
        let hi = critic_targets(&p, &refs, &eps, 0.5, 0.99);
        let y0 = critic_targets(&p, &refs, &eps, 0.0, 0.99);
        for i in 0..8 {
            // contribution −γ·T·log π scales linearly in T with a fixed sign
            assert!(((hi[i] - y0[i]) - 5.0 * (lo[i] - y0[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let p = tiny(3, 2, 9);
        let b = batch(3, 2, 6, 10);
        let refs: Vec<&Transition> = b.iter().collect();
        let y: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.5).collect();
        let mut g1 = p.critic1.zeros_like();
        let mut g2 = p.critic2.zeros_like();
        critic_loss(&p, &refs, &y, Some((&mut g1, &mut g2)));
        fd_check(&p.critic1.to_flat(), &g1.to_flat(), |th| {
            let mut q = p.clone();
            load(&mut q.critic1, th);
            critic_loss(&q, &refs, &y, None)
        });
        fd_check(&p.critic2.to_flat(), &g2.to_flat(), |th| {
            let mut q = p.clone();
            load(&mut q.critic2, th);
            critic_loss(&q, &refs, &y, None)
        });
    }

    #[test]
    fn actor_loss_gradient_matches_finite_differences() {
        let p = tiny(3, 2, 11);
        let b = batch(3, 2, 5, 12);
        let refs: Vec<&Transition> = b.iter().collect();
        let eps = noise(5, 2, 13);
        let mut g = p.actor.zeros_like();
        actor_loss(&p, &refs, &eps, 0.4, 0.05, Some(&mut g));
        fd_check(&p.actor.to_flat(), &g.to_flat(), |th| {
            let mut q = p.clone();
            load(&mut q.actor, th);
            actor_loss(&q, &refs, &eps, 0.4, 0.05, None).0
        });
    }

    #[test]
    fn temperature_loss_gradient_and_sign() {
        let (lt, mlp, h) = (0.3, -1.2, -2.0);
        let (_, g) = temperature_loss(lt, mlp, h);
        let fd = (temperature_loss(lt + 1e-6, mlp, h).0 - temperature_loss(lt - 1e-6, mlp, h).0) / 2e-6;
        assert!((g - fd).abs() / fd.abs() < 1e-8);
        // mean log π above −H̄ → descent raises the temperature
        let (_, g) = temperature_loss(lt, 2.5, h);
        assert!(g < 0.0);
        let (_, g) = temperature_loss(lt, 1.5, h);
        assert!(g > 0.0);
    }

    #[test]
    fn critic_fits_fixed_batch() {
        let mut p = tiny(3, 1, 14);
        let b = batch(3, 1, 16, 15);
        let refs: Vec<&Transition> = b.iter().collect();
        let y: Vec<f64> = b.iter().map(|t| t.reward).collect();
        let cfg = SacConfig { critic_lr: 1e-2, ..Default::default() };
        let mut opt = SacOptimizers::new(&p, &cfg);
        let first = critic_loss(&p, &refs, &y, None);
        for _ in 0..200 {
            let mut g1 = p.critic1.zeros_like();
            let mut g2 = p.critic2.zeros_like();
            critic_loss(&p, &refs, &y, Some((&mut g1, &mut g2)));
            opt.critic1.update(&mut p.critic1, &g1);
            opt.critic2.update(&mut p.critic2, &g2);
        }
        let last = critic_loss(&p, &refs, &y, None);
        assert!(last < 0.2 * first, "{first} → {last}");
    }

    #[test]
    fn polyak_with_unit_tau_copies_online_critics() {
        let mut p = tiny(3, 1, 16);
        let mut replay = ReplayBuffer::new(64);
        for t in batch(3, 1, 32, 17) {
            replay.push(t, false);
        }
        let cfg = SacConfig { tau: 1.0, batch_size: 8, ..Default::default() };
        let mut opt = SacOptimizers::new(&p, &cfg);
        let r = sac_update(&mut p, &mut opt, &replay, &cfg, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
        assert!(!r.skipped);
        assert_eq!(p.target1, p.critic1);
        assert_eq!(p.target2, p.critic2);
    }

    #[test]
    fn non_finite_update_is_skipped_and_counted() {
        let mut p = tiny(3, 1, 19);
        let mut replay = ReplayBuffer::new(16);
        for mut t in batch(3, 1, 8, 20) {
            t.reward = f64::NAN;
            replay.push(t, false);
        }
        let before = p.clone();
        let cfg = SacConfig { batch_size: 4, ..Default::default() };
        let mut opt = SacOptimizers::new(&p, &cfg);
        let r = sac_update(&mut p, &mut opt, &replay, &cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert!(r.skipped);
        assert_eq!(opt.skipped_updates, 1);
        assert_eq!(p, before);
    }

    #[test]
    fn replay_rejects_warm_up_and_overwrites_oldest() {
        let mut r = ReplayBuffer::new(3);
        let b = batch(2, 1, 5, 22);
        assert!(!r.push(b[0].clone(), true));
        for t in &b[1..] {
            assert!(r.push(t.clone(), false));
        }
        assert_eq!(r.rejected_warm_up, 1);
        assert_eq!(r.len(), 3);
        assert_eq!(r.as_slice()[0], b[4]);
        assert!(!r.as_slice().contains(&b[0]));
    }

    #[test]
    fn checkpoint_round_trip_after_quantize() {
        let mut p = tiny(4, 2, 23);
        p.quantize();
        let back = SacParams::from_checkpoint(&Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn short_training_run_keeps_estimator_frozen_and_skips_warm_up() {
        use crate::estimator::EstimatorConfig;
        let net_cfg = EstimatorConfig { window: 6, horizon: 12, hidden: 4, head_hidden: vec![4], ..Default::default() };
        let net = Arc::new(EstimatorNet::new(net_cfg, &mut ChaCha8Rng::seed_from_u64(30)));
        let before = net.to_checkpoint().to_bytes();
        let env_cfg = EnvConfig { episode_seconds: 0.8, ..Default::default() };
        let cfg = SacConfig {
            hidden: vec![8],
            batch_size: 16,
            initial_random_steps: 200,
            total_steps: 400,
            validate_every: 200,
            validation_seconds: 0.2,
            ..Default::default()
        };
        let delays = [DelayConfig::low_low(), DelayConfig::high_high()];
        let mut points = 0;
        let t = train_policy(&env_cfg, &delays, net.clone(), &cfg, &mut |_| points += 1).unwrap();
        assert_eq!(net.to_checkpoint().to_bytes(), before);
        assert_eq!(points, 2);
        assert!(t.rejected_warm_up > 0);
        assert_eq!(t.rejected_warm_up + t.stored_transitions, 400);
        assert!(t.params.actor.is_finite());
        assert!(t.curve.iter().all(|c| c.validation_return.is_finite()));
    }
}
