//! Evaluation episodes and benchmark cells.
//!
//! A cell is one (method, delay preset) pair run over several seeds on the
//! benchmark trajectory with zero-noise (deterministic) policies. Safety
//! termination is disabled so every run covers the full window.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::control::SbspModel;
use crate::delay::{DelayChannel, DelayConfig};
use crate::arm::JointState;
use crate::env::{channel_seed, EnvConfig, Method, StepInfo, TeleopEnv, TrajectoryMode};
use crate::estimator::EstimatorNet;
use crate::metrics::ErrorStats;
use crate::sac::SacParams;
use crate::{Error, Result};

pub const EVAL_SECONDS: f64 = 50.0;

/// Frozen models shared by every evaluation cell.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub estimator: Option<Arc<EstimatorNet>>,
    pub sbsp: Option<Arc<SbspModel>>,
    pub policy: Option<Arc<SacParams>>,
}

impl Models {
    /// Names the missing model for `method`, if any.
    pub fn missing_for(&self, method: Method) -> Option<&'static str> {
        match method {
            Method::DrRl if self.estimator.is_none() => Some("estimator"),
            Method::DrRl if self.policy.is_none() => Some("policy"),
            Method::Pmdc if self.sbsp.is_none() => Some("sbsp"),
            _ => None,
        }
    }
}

/// One row per control tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: usize,
    pub time: f64,
    pub cartesian_error: f64,
    pub est_error: f64,
    pub track_error: f64,
    pub leader_q: Vec<f64>,
    pub follower_q: Vec<f64>,
    pub estimate_q: Vec<f64>,
    pub residual: Vec<f64>,
    pub reward: f64,
}

impl TraceRow {
    fn new(info: &StepInfo, residual: &[f64], reward: f64) -> Self {
        Self {
            tick: info.tick,
            time: info.time,
            cartesian_error: info.cartesian_error,
            est_error: info.est_error,
            track_error: info.track_error,
            leader_q: info.leader.q.clone(),
            follower_q: info.follower.q.clone(),
            estimate_q: info.estimate.q.clone(),
            residual: residual.to_vec(),
            reward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub cartesian: ErrorStats,
    pub estimation: ErrorStats,
    pub total_return: f64,
    pub steps: usize,
    pub diverged: bool,
    pub trace: Vec<TraceRow>,
}

/// Evaluation environment: benchmark trajectory, no early safety cut-off.
pub fn eval_env_config(base: &EnvConfig, delay: &DelayConfig, seconds: f64) -> EnvConfig {
    EnvConfig {
        delay: delay.clone(),
        trajectory: TrajectoryMode::Benchmark,
        episode_seconds: seconds,
        safety_steps: 0,
        ..base.clone()
    }
}

/// Deterministic residual for `method`; `None` means zero residual.
pub fn residual_action(models: &Models, method: Method, obs: &[f64]) -> Option<Vec<f64>> {
    match (&models.policy, method) {
        (Some(p), Method::DrRl) => Some(p.act_deterministic(obs)),
        _ => None,
    }
}

/// Runs one episode. DR-RL adds the deterministic residual when a policy is
/// present and runs nominal-only otherwise.
pub fn run_episode(cfg: &EnvConfig, method: Method, models: &Models, seed: u64) -> Result<EpisodeResult> {
    let mut env = TeleopEnv::new(cfg.clone(), method, models.estimator.clone(), models.sbsp.clone())?;
    let n = cfg.dof();
    if let Some(p) = &models.policy {
        if method == Method::DrRl && (p.obs_dim() != cfg.obs_dim() || p.action_dim() != n) {
            return Err(Error::Dimension { expected: cfg.obs_dim(), got: p.obs_dim() });
        }
    }
    let mut obs = env.reset(seed)?;
    let mut trace = Vec::with_capacity(cfg.horizon_steps());
    let mut total_return = 0.0;
    let mut diverged = false;
    let zero = alloc::vec![0.0; n];
    loop {
        let action = residual_action(models, method, &obs.values).unwrap_or_else(|| zero.clone());
        let r = env.step(&action)?;
        total_return += r.reward;
        trace.push(TraceRow::new(&r.info, &action, r.reward));
        diverged |= r.info.diverged;
        obs = r.observation;
        if r.done {
            break;
        }
    }
    let cart: Vec<f64> = trace.iter().map(|r| r.cartesian_error).collect();
    let est: Vec<f64> = trace.iter().map(|r| r.est_error).collect();
    Ok(EpisodeResult {
        seed,
        cartesian: ErrorStats::from_samples(&cart),
        estimation: ErrorStats::from_samples(&est),
        total_return,
        steps: trace.len(),
        diverged,
        trace,
    })
}

/// Aggregate over seeds: mean of per-seed means, pooled P95/max/std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub per_seed_mean: Vec<f64>,
    pub cartesian: ErrorStats,
    pub estimation_mean: f64,
    pub diverged_runs: usize,
}

pub fn summarize(method: Method, preset: &str, runs: &[EpisodeResult]) -> CellSummary {
    let pooled: Vec<f64> = runs.iter().flat_map(|r| r.trace.iter().map(|t| t.cartesian_error)).collect();
    let mut cartesian = ErrorStats::from_samples(&pooled);
    let k = runs.len().max(1) as f64;
    cartesian.mean = runs.iter().map(|r| r.cartesian.mean).sum::<f64>() / k;
    CellSummary {
        method,
        preset: preset.into(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        per_seed_mean: runs.iter().map(|r| r.cartesian.mean).collect(),
        cartesian,
        estimation_mean: runs.iter().map(|r| r.estimation.mean).sum::<f64>() / k,
        diverged_runs: runs.iter().filter(|r| r.diverged).count(),
    }
}

/// One sampled state delay, as seen by the channel of episode `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub send_time: f64,
    pub delay: f64,
    pub arrival_time: f64,
}

/// Regenerates the state-delay sequence of an episode run with `seed`.
pub fn delay_trace(delay: &DelayConfig, seed: u64, seconds: f64) -> Result<Vec<DelaySample>> {
    let mut ch = DelayChannel::new(delay.clone(), channel_seed(seed));
    let steps = crate::to_ticks(seconds, delay.dt).max(0) as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let blank = JointState::at_rest(alloc::vec![0.0], 0.0);
    for k in 0..=steps {
        let now = k as f64 * delay.dt;
        let p = ch.push_state(blank.clone(), now)?;
        out.push(DelaySample { send_time: p.send_time, delay: p.sampled_delay, arrival_time: p.arrival_time });
        ch.poll_arrivals(now);
    }
    Ok(out)
}
