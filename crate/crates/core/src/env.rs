//! Teleoperation episode: leader arm → delay channel → estimator → hybrid
//! torque → follower arm, with the composite reward and the policy observation.
//!
//! One call to [`TeleopEnv::step`] is one control tick:
//!
//! 1. the nominal torque is computed from the current leader estimate and the
//!    follower's joint sensors, and the clamped residual is added;
//! 2. the command enters the ω_a lag line; the command that leaves it is
//!    clamped to the torque limits and drives the follower (with disturbance);
//! 3. the leader advances on its own reference and publishes its state;
//! 4. packets due by the new time are delivered and the estimate is refreshed;
//! 5. reward (from simulator ground truth) and the next observation are built.
//!
//! The channel itself delivers packets in raw arrival order. The PD baseline
//! holds whatever arrived last; the learned predictors see the stream after
//! the configured reorder policy is applied.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmParams, DisturbanceSpec, JointState};
use crate::control::{self, GainConfig, SbspBuffer, SbspModel, FEEDFORWARD_ACCEL_LIMIT};
use crate::delay::{DelayChannel, DelayConfig, DelayedPacket, LagBuffer, ReorderPolicy, StaleFilter};
use crate::estimator::{EstimatorCore, EstimatorNet};
use crate::trajectory::{Leader, LeaderDrive, TrajectoryParams, TrajectoryRanges};
use crate::{to_ticks, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// LSTM estimator + computed torque + learned residual.
    DrRl,
    /// State-buffer predictor + computed torque.
    Pmdc,
    /// Computed-torque PD toward the last packet that arrived.
    Pd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DrRl, Method::Pmdc, Method::Pd];

    pub fn name(self) -> &'static str {
        match self {
            Method::DrRl => "dr_rl",
            Method::Pmdc => "pmdc",
            Method::Pd => "pd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_p: f64,
    pub lambda_v: f64,
    pub lambda_a: f64,
    /// Per-violation penalty (negative).
    pub rho: f64,
    pub eps_track: f64,
    pub eps_est: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda_p: 10.0, lambda_v: 5.0, lambda_a: 0.01, rho: -5.0, eps_track: 0.5, eps_est: 0.3, r_min: -20.0, r_max: 5.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_track: f64,
    pub r_reg: f64,
    pub r_safe: f64,
    pub joint_violation: bool,
    pub track_violation: bool,
    pub est_violation: bool,
    pub raw_total: f64,
    pub total: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Composite reward. Tracking terms compare the estimate with the follower;
/// the safety flags use simulator ground truth.
pub fn compute_reward(
    cfg: &RewardConfig,
    arm: &ArmParams,
    leader_true: &JointState,
    est_q: &[f64],
    est_qdot: &[f64],
    follower: &JointState,
    action: &[f64],
) -> RewardBreakdown {
    let n = follower.q.len().max(1) as f64;
    let r_track = -cfg.lambda_p * sq_dist(est_q, &follower.q) - cfg.lambda_v * sq_dist(est_qdot, &follower.qdot);
    let r_reg = -cfg.lambda_a * action.iter().map(|a| a * a).sum::<f64>() / n;
    let joint_violation = follower.q.iter().zip(&arm.joint_limits).any(|(q, [lo, hi])| !(*q > *lo && *q < *hi));
    let track_violation = sq_dist(&leader_true.q, &follower.q).sqrt() > cfg.eps_track;
    let est_violation = sq_dist(&leader_true.q, est_q).sqrt() > cfg.eps_est;
    let r_safe = cfg.rho * (joint_violation as u8 + track_violation as u8 + est_violation as u8) as f64;
    let raw_total = r_track + r_reg + r_safe;
    let total = if raw_total.is_nan() { cfg.r_min } else { raw_total.clamp(cfg.r_min, cfg.r_max) };
    RewardBreakdown { r_track, r_reg, r_safe, joint_violation, track_violation, est_violation, raw_total, total }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// The fixed (3, 4) evaluation Lissajous.
    Benchmark,
    /// A figure-8 drawn from the ranges at every reset.
    Randomized(TrajectoryRanges),
    Fixed(TrajectoryParams),
    /// Operator-driven Cartesian target (live sessions).
    Target { x: f64, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub arm: ArmParams,
    pub gains: GainConfig,
    pub leader_gains: GainConfig,
    pub delay: DelayConfig,
    pub reward: RewardConfig,
    pub disturbance: DisturbanceSpec,
    /// N: follower history slots in the observation.
    pub history_len: usize,
    pub episode_seconds: f64,
    /// a_max as a fraction of each joint's torque limit.
    pub residual_fraction: f64,
    /// Terminate when ‖e_track‖ > safety_factor·ε_track for `safety_steps` ticks.
    pub safety_factor: f64,
    pub safety_steps: usize,
    /// Build the policy observation from the ω_o-lagged follower state.
    pub lag_observation: bool,
    /// Feed the computed-torque law the ω_o-lagged follower state too. Off by
    /// default: the nominal loop sits next to the follower's joint sensors and
    /// only the actuation lag ω_a is inside it.
    pub lag_nominal_feedback: bool,
    pub trajectory: TrajectoryMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let arm = ArmParams::two_link();
        let n = arm.n_links();
        Self {
            gains: GainConfig::follower_default(n),
            leader_gains: GainConfig::leader_default(n),
            delay: DelayConfig::low_low(),
            reward: RewardConfig::default(),
            disturbance: DisturbanceSpec::sinusoidal(n, 0.2, 1.0),
            history_len: 5,
            episode_seconds: 20.0,
            residual_fraction: 0.3,
            safety_factor: 3.0,
            safety_steps: 250,
            lag_observation: true,
            lag_nominal_feedback: false,
            trajectory: TrajectoryMode::Randomized(TrajectoryRanges::default()),
            arm,
        }
    }
}

impl EnvConfig {
    pub fn dt(&self) -> f64 {
        self.delay.dt
    }

    pub fn dof(&self) -> usize {
        self.arm.n_links()
    }

    pub fn obs_dim(&self) -> usize {
        (6 + 2 * self.history_len) * self.dof()
    }

    pub fn a_max(&self) -> Vec<f64> {
        self.arm.torque_limits.iter().map(|l| l * self.residual_fraction).collect()
    }

    pub fn horizon_steps(&self) -> usize {
        (self.episode_seconds / self.dt() - 1e-9).ceil().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.delay.validate()?;
        self.gains.validate(self.dof())?;
        self.leader_gains.validate(self.dof())?;
        self.disturbance.validate()?;
        if !(self.residual_fraction >= 0.0) || !(self.episode_seconds > 0.0) {
            return Err(Error::InvalidParam("residual fraction and episode length must be positive".into()));
        }
        if self.reward.r_min > self.reward.r_max {
            return Err(Error::InvalidParam("reward clip range is empty".into()));
        }
        Ok(())
    }
}

/// Policy input: [q_f, q̇_f, q̂_l, q̂̇_l, e_q, e_q̇, (q_f, q̇_f)(t−k) for k = 1…N].
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    /// The estimator has not yet filled its window (or nothing has arrived).
    pub warm_up: bool,
}

/// Current leader estimate used by the controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qddot: Vec<f64>,
    /// No packet has been delivered yet; the initial leader state is used.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub tick: usize,
    pub time: f64,
    pub leader: JointState,
    pub follower: JointState,
    pub estimate: Estimate,
    /// ‖q̂_l − q_l‖ (rad).
    pub est_error: f64,
    /// ‖q_l − q_f‖ (rad).
    pub track_error: f64,
    /// ‖f_k(q_l) − f_k(q_f)‖ (m).
    pub cartesian_error: f64,
    pub reward: RewardBreakdown,
    pub nominal_torque: Vec<f64>,
    pub commanded_torque: Vec<f64>,
    pub applied_torque: Vec<f64>,
    /// Packets delivered this tick (raw arrivals).
    pub arrivals: usize,
    /// Sampled ω_s of the most recent raw arrival (s).
    pub last_delay: Option<f64>,
    pub warm_up: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// Episode over, for either reason below.
    pub done: bool,
    /// Genuine terminal state (safety or divergence); bootstrapping stops.
    pub terminated: bool,
    /// Horizon reached.
    pub truncated: bool,
    pub info: StepInfo,
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the delay channel for the episode started by `reset(seed)`.
pub fn channel_seed(episode_seed: u64) -> u64 {
    derive_seed(episode_seed, 2)
}

#[derive(Clone, Debug)]
pub struct TeleopEnv {
    cfg: EnvConfig,
    method: Method,
    est_net: Option<Arc<EstimatorNet>>,
    sbsp_model: Option<Arc<SbspModel>>,
    leader: Leader,
    initial_leader: JointState,
    follower: JointState,
    channel: DelayChannel,
    stale: StaleFilter,
    lstm: Option<EstimatorCore>,
    sbsp: Option<SbspBuffer>,
    latest_raw: Option<DelayedPacket>,
    follower_hist: LagBuffer<JointState>,
    action_line: LagBuffer<Vec<f64>>,
    estimate: Estimate,
    prev_est_qdot: Option<Vec<f64>>,
    tick: usize,
    over_threshold: usize,
    last_delay: Option<f64>,
    /// Feed every available predictor, not only the active one (live sessions).
    run_all_predictors: bool,
    pub trajectory: Option<TrajectoryParams>,
    episode_seed: u64,
}

impl TeleopEnv {
    /// Builds an environment for `method`. DR-RL needs an estimator network,
    /// PMDC a state-buffer model; PD needs neither.
    pub fn new(cfg: EnvConfig, method: Method, est_net: Option<Arc<EstimatorNet>>, sbsp_model: Option<Arc<SbspModel>>) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.dof();
        if method == Method::DrRl && est_net.is_none() {
            return Err(Error::NotReady("DR-RL needs a trained estimator"));
        }
        if method == Method::Pmdc && sbsp_model.is_none() {
            return Err(Error::NotReady("PMDC-style control needs a trained state-buffer model"));
        }
        if let Some(net) = &est_net {
            if net.config.dof != n {
                return Err(Error::Dimension { expected: n, got: net.config.dof });
            }
        }
        let leader = Leader::new(cfg.arm.clone(), cfg.leader_gains.clone(), LeaderDrive::Target(default_target(&cfg.arm)), 0.0)?;
        let raw_channel = DelayConfig { reorder_policy: ReorderPolicy::DeliverInOrder, ..cfg.delay.clone() };
        let mut env = Self {
            method,
            est_net,
            sbsp_model,
            initial_leader: leader.state.clone(),
            follower: leader.state.clone(),
            leader,
            channel: DelayChannel::new(raw_channel, 0),
            stale: StaleFilter::default(),
            lstm: None,
            sbsp: None,
            latest_raw: None,
            follower_hist: LagBuffer::new(cfg.delay.observation_lag_ticks() + cfg.history_len + 1),
            action_line: LagBuffer::new(cfg.delay.action_lag_ticks() + 1),
            estimate: Estimate { q: vec![0.0; n], qdot: vec![0.0; n], qddot: vec![0.0; n], fallback: true },
            prev_est_qdot: None,
            tick: 0,
            over_threshold: 0,
            last_delay: None,
            run_all_predictors: false,
            trajectory: None,
            episode_seed: 0,
            cfg,
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt()
    }

    pub fn leader_state(&self) -> &JointState {
        &self.leader.state
    }

    pub fn follower_state(&self) -> &JointState {
        &self.follower
    }

    pub fn estimate(&self) -> &Estimate {
        &self.estimate
    }

    pub fn estimator(&self) -> Option<&EstimatorCore> {
        self.lstm.as_ref()
    }

    pub fn sbsp(&self) -> Option<&SbspBuffer> {
        self.sbsp.as_ref()
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    /// Keeps every available predictor in sync so methods can be switched mid-episode.
    pub fn set_run_all_predictors(&mut self, on: bool) {
        self.run_all_predictors = on;
    }

    pub fn set_method(&mut self, method: Method) -> Result<()> {
        match method {
            Method::DrRl if self.lstm.is_none() => return Err(Error::NotReady("no estimator loaded")),
            Method::Pmdc if self.sbsp.is_none() => return Err(Error::NotReady("no state-buffer model loaded")),
            _ => {}
        }
        self.method = method;
        self.prev_est_qdot = None;
        self.refresh_estimate();
        Ok(())
    }

    /// New ω_s bounds for packets pushed from now on.
    pub fn set_delay_bounds(&mut self, min: f64, max: f64) -> Result<()> {
        self.channel.set_state_delay_bounds(min, max)?;
        self.cfg.delay.omega_s_min = min;
        self.cfg.delay.omega_s_max = max;
        Ok(())
    }

    pub fn set_leader_target(&mut self, x: [f64; 2]) {
        self.leader.set_target(x);
    }

    fn uses_lstm(&self) -> bool {
        self.method == Method::DrRl || self.run_all_predictors
    }

    fn uses_sbsp(&self) -> bool {
        self.method == Method::Pmdc || self.run_all_predictors
    }

    /// Starts a new episode; everything random derives from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let drive = match &self.cfg.trajectory {
            TrajectoryMode::Benchmark => LeaderDrive::Reference(TrajectoryParams::benchmark()),
            TrajectoryMode::Randomized(r) => LeaderDrive::Reference(r.sample(&mut rng, &self.cfg.arm)?),
            TrajectoryMode::Fixed(p) => LeaderDrive::Reference(p.clone()),
            TrajectoryMode::Target { x, y } => LeaderDrive::Target([*x, *y]),
        };
        self.trajectory = match &drive {
            LeaderDrive::Reference(p) => Some(p.clone()),
            LeaderDrive::Target(_) => None,
        };
        self.leader = Leader::new(self.cfg.arm.clone(), self.cfg.leader_gains.clone(), drive, 0.0)?;
        self.initial_leader = self.leader.state.clone();
        self.follower = self.leader.state.clone();
        let raw = DelayConfig { reorder_policy: ReorderPolicy::DeliverInOrder, ..self.cfg.delay.clone() };
        self.channel = DelayChannel::new(raw, channel_seed(seed));
        self.stale = StaleFilter::default();
        self.lstm = self.est_net.as_ref().map(|n| EstimatorCore::new(n.clone()));
        self.sbsp = match &self.sbsp_model {
            Some(m) => Some(SbspBuffer::new(m.clone(), self.cfg.dt())?),
            None => None,
        };
        self.latest_raw = None;
        self.follower_hist.clear();
        self.follower_hist.push(self.follower.clone());
        self.action_line.clear();
        self.prev_est_qdot = None;
        self.tick = 0;
        self.over_threshold = 0;
        self.last_delay = None;
        self.episode_seed = seed;
        self.publish_and_receive(0.0)?;
        self.refresh_estimate();
        Ok(self.build_observation())
    }

    fn publish_and_receive(&mut self, now: f64) -> Result<usize> {
        self.channel.push_state(self.leader.state.clone(), now)?;
        let arrivals = self.channel.poll_arrivals(now);
        let count = arrivals.len();
        let mut fresh = false;
        for p in arrivals {
            self.last_delay = Some(p.sampled_delay);
            let accept = match self.cfg.delay.reorder_policy {
                ReorderPolicy::DropStale => self.stale.accept(p.send_tick),
                ReorderPolicy::DeliverInOrder => true,
            };
            if accept {
                if self.uses_lstm() {
                    if let Some(core) = &mut self.lstm {
                        core.ingest_packet(&p, now);
                    }
                }
                if self.uses_sbsp() {
                    if let Some(b) = &mut self.sbsp {
                        b.on_arrival(&p, now);
                        fresh = true;
                    }
                }
            }
            self.latest_raw = Some(p);
        }
        if !fresh && self.uses_sbsp() {
            if let Some(b) = &mut self.sbsp {
                b.on_tick(now);
            }
        }
        Ok(count)
    }

    fn refresh_estimate(&mut self) {
        let now = self.time();
        let n = self.cfg.dof();
        let fallback = || (self.initial_leader.q.clone(), self.initial_leader.qdot.clone());
        let est = match self.method {
            Method::DrRl => match self.lstm.as_mut().map(|c| c.predict_now(now)) {
                Some(Ok(p)) => Estimate { q: p.q, qdot: p.qdot, qddot: p.qddot, fallback: false },
                _ => {
                    let (q, qdot) = fallback();
                    Estimate { q, qdot, qddot: vec![0.0; n], fallback: true }
                }
            },
            Method::Pmdc => match self.sbsp.as_ref().map(|b| b.predict()) {
                Some(Ok((q, qdot))) => {
                    let qddot = match &self.prev_est_qdot {
                        Some(prev) => control::finite_difference_accel(prev, &qdot, self.cfg.dt(), FEEDFORWARD_ACCEL_LIMIT),
                        None => vec![0.0; n],
                    };
                    Estimate { q, qdot, qddot, fallback: false }
                }
                _ => {
                    let (q, qdot) = fallback();
                    Estimate { q, qdot, qddot: vec![0.0; n], fallback: true }
                }
            },
            Method::Pd => match &self.latest_raw {
                Some(p) => Estimate { q: p.payload.q.clone(), qdot: p.payload.qdot.clone(), qddot: vec![0.0; n], fallback: false },
                None => {
                    let (q, qdot) = fallback();
                    Estimate { q, qdot, qddot: vec![0.0; n], fallback: true }
                }
            },
        };
        self.prev_est_qdot = Some(est.qdot.clone());
        self.estimate = est;
    }

    fn warm_up(&self) -> bool {
        match self.method {
            Method::DrRl => self.lstm.as_ref().map_or(true, |c| c.warm_up() || c.anchor().is_none()),
            _ => self.estimate.fallback,
        }
    }

    /// Follower state as seen by the agent (ω_o-lagged unless disabled).
    pub fn observed_follower(&self) -> JointState {
        let lag = if self.cfg.lag_observation { self.cfg.delay.observation_lag_ticks() } else { 0 };
        self.follower_hist.tap(lag).expect("history is never empty").value.clone()
    }

    /// Reads only the follower history and the current estimate.
    pub fn build_observation(&self) -> Observation {
        let n = self.cfg.dof();
        let lag = if self.cfg.lag_observation { self.cfg.delay.observation_lag_ticks() } else { 0 };
        let f = self.follower_hist.tap(lag).expect("history is never empty").value;
        let e = &self.estimate;
        let mut v = Vec::with_capacity(self.cfg.obs_dim());
        v.extend(&f.q);
        v.extend(&f.qdot);
        v.extend(&e.q);
        v.extend(&e.qdot);
        v.extend(e.q.iter().zip(&f.q).map(|(a, b)| a - b));
        v.extend(e.qdot.iter().zip(&f.qdot).map(|(a, b)| a - b));
        for k in 1..=self.cfg.history_len {
            match self.follower_hist.tap(lag + k) {
                Some(t) if !t.warm_up => {
                    v.extend(&t.value.q);
                    v.extend(&t.value.qdot);
                }
                _ => v.extend(core::iter::repeat(0.0).take(2 * n)),
            }
        }
        Observation { values: v, warm_up: self.warm_up() }
    }

    /// Follower state used by the computed-torque law.
    pub fn feedback_follower(&self) -> JointState {
        let lag = if self.cfg.lag_nominal_feedback { self.cfg.delay.observation_lag_ticks() } else { 0 };
        self.follower_hist.tap(lag).expect("history is never empty").value.clone()
    }

    /// Nominal torque for the current estimate and the feedback follower state.
    pub fn nominal_torque(&self) -> Result<Vec<f64>> {
        let f = self.feedback_follower();
        let e = &self.estimate;
        match self.method {
            Method::Pd => {
                let held = JointState::new(e.q.clone(), e.qdot.clone(), f.t);
                control::vanilla_pd_torque(&self.cfg.arm, &f, &held, &self.cfg.gains)
            }
            _ => {
                let qdd = control::reference_accel(&e.q, &e.qdot, &e.qddot, &f, &self.cfg.gains);
                control::computed_torque(&self.cfg.arm, &f, &qdd)
            }
        }
    }

    /// Advances one tick with residual torque `action` (clamped to ±a_max).
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let n = self.cfg.dof();
        if action.len() != n {
            return Err(Error::Dimension { expected: n, got: action.len() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParam("residual action must be finite".into()));
        }
        let a_max = self.cfg.a_max();
        let residual: Vec<f64> = action.iter().zip(&a_max).map(|(a, m)| a.clamp(-m, *m)).collect();
        let nominal = self.nominal_torque()?;
        let commanded: Vec<f64> = nominal.iter().zip(&residual).map(|(a, b)| a + b).collect();
        self.action_line.push(commanded.clone());
        let lag = self.cfg.delay.action_lag_ticks();
        let applied = self.cfg.arm.clamp_torque(self.action_line.tap(lag).expect("just pushed").value);
        let dt = self.cfg.dt();

        let mut diverged = false;
        match arm::step(&self.cfg.arm, &self.follower, &applied, &self.cfg.disturbance, dt) {
            Ok(s) => self.follower = s,
            Err(Error::Diverged { .. }) => diverged = true,
            Err(e) => return Err(e),
        }
        if !diverged {
            self.follower_hist.push(self.follower.clone());
        }
        self.leader.step(dt)?;
        self.tick += 1;
        let now = self.time();
        let arrivals = self.publish_and_receive(now)?;
        self.refresh_estimate();

        let leader = self.leader.state.clone();
        let mut reward = compute_reward(&self.cfg.reward, &self.cfg.arm, &leader, &self.estimate.q, &self.estimate.qdot, &self.follower, &residual);
        let track_error = sq_dist(&leader.q, &self.follower.q).sqrt();
        let est_error = sq_dist(&leader.q, &self.estimate.q).sqrt();
        let pl = arm::forward_kinematics(&self.cfg.arm, &leader.q);
        let pf = arm::forward_kinematics(&self.cfg.arm, &self.follower.q);
        let cartesian_error = ((pl[0] - pf[0]).powi(2) + (pl[1] - pf[1]).powi(2)).sqrt();

        if track_error > self.cfg.safety_factor * self.cfg.reward.eps_track {
            self.over_threshold += 1;
        } else {
            self.over_threshold = 0;
        }
        let unsafe_run = self.cfg.safety_steps > 0 && self.over_threshold >= self.cfg.safety_steps;
        if diverged || !track_error.is_finite() {
            reward.total = self.cfg.reward.r_min;
        }
        let terminated = diverged || unsafe_run;
        let truncated = !terminated && self.tick >= self.cfg.horizon_steps();
        let observation = self.build_observation();
        let info = StepInfo {
            tick: self.tick,
            time: now,
            leader,
            follower: self.follower.clone(),
            estimate: self.estimate.clone(),
            est_error,
            track_error,
            cartesian_error,
            reward: reward.clone(),
            nominal_torque: nominal,
            commanded_torque: commanded,
            applied_torque: applied,
            arrivals,
            last_delay: self.last_delay,
            warm_up: observation.warm_up,
            diverged,
        };
        Ok(StepResult { observation, reward: reward.total, done: terminated || truncated, terminated, truncated, info })
    }
}

fn default_target(arm: &ArmParams) -> [f64; 2] {
    [0.55 * arm.reach(), 0.0]
}

/// Human-readable description used in error messages.
pub fn describe(method: Method, cfg: &EnvConfig) -> String {
    format!("{} on ω_s ∈ [{:.3}, {:.3}] s", method.name(), cfg.delay.omega_s_min, cfg.delay.omega_s_max)
}

/// Number of ticks in `seconds` on the environment grid.
pub fn steps_for(cfg: &EnvConfig, seconds: f64) -> usize {
    to_ticks(seconds, cfg.dt()).max(0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pd_env(delay: DelayConfig) -> TeleopEnv {
        let cfg = EnvConfig { delay, trajectory: TrajectoryMode::Benchmark, ..Default::default() };
        TeleopEnv::new(cfg, Method::Pd, None, None).unwrap()
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let arm = ArmParams::two_link();
        let f = JointState::new(vec![0.1, 0.2], vec![0.3, 0.4], 0.0);
        let r = compute_reward(&cfg, &arm, &f, &f.q, &f.qdot, &f, &[0.0, 0.0]);
        assert_eq!(r.total, 0.0);
        assert_eq!(r.r_safe, 0.0);
        let est_q = [0.1 + 0.1, 0.2];
        let lead = JointState::new(est_q.to_vec(), f.qdot.clone(), 0.0);
        let r = compute_reward(&cfg, &arm, &lead, &est_q, &f.qdot, &f, &[0.0, 0.0]);
        assert!((r.r_track - -0.1).abs() < 1e-12, "{}", r.r_track);
        let far = JointState::new(vec![2.9, -2.8], vec![9.0, 9.0], 0.0);
        let bad_f = JointState::new(vec![3.0, 0.0], vec![0.0, 0.0], 0.0);
        let r = compute_reward(&cfg, &arm, &far, &[0.0, 0.0], &[0.0, 0.0], &bad_f, &[15.0, 7.5]);
        assert!(r.joint_violation && r.track_violation && r.est_violation);
        assert_eq!(r.r_safe, -15.0);
        assert!(r.raw_total < -20.0);
        assert_eq!(r.total, -20.0);
    }

    #[test]
    fn reset_is_deterministic_with_zero_initial_error() {
        let cfg = EnvConfig::default();
        let mut a = TeleopEnv::new(cfg.clone(), Method::Pd, None, None).unwrap();
        let mut b = TeleopEnv::new(cfg, Method::Pd, None, None).unwrap();
        let oa = a.reset(42).unwrap();
        let ob = b.reset(42).unwrap();
        assert_eq!(oa, ob);
        let n = 2;
        assert!(oa.values[4 * n..6 * n].iter().all(|&v| v == 0.0));
        assert_eq!(oa.values.len(), a.config().obs_dim());
        let oc = b.reset(43).unwrap();
        assert_ne!(a.trajectory, b.trajectory);
        assert_ne!(oa, oc);
    }

    #[test]
    fn horizon_ends_episode_exactly() {
        let cfg = EnvConfig { episode_seconds: 0.2, ..Default::default() };
        let mut env = TeleopEnv::new(cfg, Method::Pd, None, None).unwrap();
        env.reset(1).unwrap();
        for k in 1..=50 {
            let r = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(r.done, k == 50, "tick {k}");
            assert!(!r.terminated);
        }
    }

    #[test]
    fn residual_adds_exactly_before_torque_clamp() {
        let mut env = pd_env(DelayConfig::low_low());
        env.reset(3).unwrap();
        let big = [1e3, -1e3];
        let r = env.step(&big).unwrap();
        let a_max = env.config().a_max();
        assert_eq!(r.info.commanded_torque[0] - r.info.nominal_torque[0], a_max[0]);
        assert_eq!(r.info.commanded_torque[1] - r.info.nominal_torque[1], -a_max[1]);
    }

    #[test]
    fn action_line_applies_commands_after_lag() {
        let mut env = pd_env(DelayConfig::low_low());
        env.reset(5).unwrap();
        let lag = env.config().delay.action_lag_ticks();
        assert_eq!(lag, 13);
        let mut commanded = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..60 {
            let a = [rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)];
            let r = env.step(&a).unwrap();
            commanded.push(r.info.commanded_torque.clone());
            let src = if k >= lag { &commanded[k - lag] } else { &commanded[0] };
            assert_eq!(r.info.applied_torque, env.config().arm.clamp_torque(src));
        }
    }

    #[test]
    fn zero_delay_nominal_loop_tracks() {
        // at zero delay the state buffer replays the fresh measurement, so the
        // model weights are irrelevant and the estimate is exact
        let mut m = SbspModel::new(2, &[4], &mut ChaCha8Rng::seed_from_u64(0));
        m.trained = true;
        let cfg = EnvConfig {
            delay: DelayConfig::zero(),
            disturbance: DisturbanceSpec::none(),
            trajectory: TrajectoryMode::Benchmark,
            ..Default::default()
        };
        let mut env = TeleopEnv::new(cfg, Method::Pmdc, None, Some(Arc::new(m))).unwrap();
        env.reset(0).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..2500 {
            let r = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(r.info.est_error, 0.0);
            worst = worst.max(r.info.track_error);
        }
        assert!(worst < 1e-2, "worst tracking error {worst}");
    }

    #[test]
    fn observation_never_reads_ground_truth() {
        let mut env = pd_env(DelayConfig::high_high());
        env.reset(7).unwrap();
        for _ in 0..100 {
            env.step(&[0.1, -0.1]).unwrap();
        }
        let obs = env.build_observation();
        let mut blind = env.clone();
        blind.leader.state.q.iter_mut().for_each(|v| *v = 0.0);
        blind.leader.state.qdot.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(blind.build_observation(), obs);
    }

    #[test]
    fn history_is_zero_padded_during_warm_up() {
        let mut env = pd_env(DelayConfig::low_low());
        let obs = env.reset(9).unwrap();
        let n = 2;
        assert!(obs.values[6 * n..].iter().all(|&v| v == 0.0));
        for _ in 0..14 {
            env.step(&[0.0, 0.0]).unwrap();
        }
        let obs = env.build_observation();
        // after lag + 1 pushes the first history slot is real, the rest still padded
        assert!(obs.values[6 * n..8 * n].iter().any(|&v| v != 0.0));
        assert!(obs.values[8 * n..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_and_actions_reproduce_bitwise() {
        let run = || {
            let mut env = pd_env(DelayConfig::high_high());
            env.reset(11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut trace = Vec::new();
            for _ in 0..300 {
                let a = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let r = env.step(&a).unwrap();
                trace.push((r.observation.values, r.info.follower.q, r.reward));
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reward_always_within_clip_range() {
        let cfg = RewardConfig::default();
        let arm = ArmParams::two_link();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut v = |s: f64| -> Vec<f64> { (0..2).map(|_| rng.random_range(-s..s)).collect() };
        for _ in 0..20000 {
            let l = JointState::new(v(4.0), v(10.0), 0.0);
            let f = JointState::new(v(4.0), v(10.0), 0.0);
            let r = compute_reward(&cfg, &arm, &l, &v(4.0), &v(10.0), &f, &v(20.0));
            assert!(r.total >= -20.0 && r.total <= 5.0);
            assert!([0.0, -5.0, -10.0, -15.0].contains(&r.r_safe));
        }
    }
}
