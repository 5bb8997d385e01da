//! Stochastic leader→agent delay channel and fixed-lag taps.
//!
//! Three links are modelled: the leader state reaches the agent after a
//! uniformly distributed delay ω_s, while the agent→follower action path and
//! the follower→agent observation path have constant lags ω_a and ω_o.
//! All delays live on the control grid; conversion from seconds rounds to the
//! nearest tick with ties rounding up.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::JointState;
use crate::{to_ticks, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderPolicy {
    /// Deliver a packet only if it was sent after everything already delivered.
    #[default]
    DropStale,
    /// Deliver every packet in arrival order, even if an older packet overtook it.
    DeliverInOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub omega_s_min: f64,
    pub omega_s_max: f64,
    pub omega_a: f64,
    pub omega_o: f64,
    pub dt: f64,
    #[serde(default)]
    pub reorder_policy: ReorderPolicy,
}

pub const PRESET_NAMES: [&str; 3] = ["low_low", "high_low", "high_high"];

impl DelayConfig {
    fn with_state_delay(min: f64, max: f64) -> Self {
        Self {
            omega_s_min: min,
            omega_s_max: max,
            omega_a: 0.050,
            omega_o: 0.050,
            dt: crate::DEFAULT_DT,
            reorder_policy: ReorderPolicy::DropStale,
        }
    }

    /// Low delay, low variance: ω_s ~ U(120, 160) ms.
    pub fn low_low() -> Self {
        Self::with_state_delay(0.120, 0.160)
    }

    /// High delay, low variance: ω_s ~ U(200, 240) ms.
    pub fn high_low() -> Self {
        Self::with_state_delay(0.200, 0.240)
    }

    /// High delay, high variance: ω_s ~ U(40, 240) ms.
    pub fn high_high() -> Self {
        Self::with_state_delay(0.040, 0.240)
    }

    /// No delay anywhere.
    pub fn zero() -> Self {
        Self { omega_a: 0.0, omega_o: 0.0, ..Self::with_state_delay(0.0, 0.0) }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "low_low" => Some(Self::low_low()),
            "high_low" => Some(Self::high_low()),
            "high_high" => Some(Self::high_high()),
            "zero" => Some(Self::zero()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParam("dt must be positive".into()));
        }
        if !(0.0 <= self.omega_s_min && self.omega_s_min <= self.omega_s_max) {
            return Err(Error::InvalidParam("need 0 <= omega_s_min <= omega_s_max".into()));
        }
        if !(self.omega_a >= 0.0 && self.omega_o >= 0.0) {
            return Err(Error::InvalidParam("constant delays must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn state_delay_ticks(&self) -> (i64, i64) {
        (to_ticks(self.omega_s_min, self.dt), to_ticks(self.omega_s_max, self.dt))
    }

    pub fn action_lag_ticks(&self) -> usize {
        to_ticks(self.omega_a, self.dt) as usize
    }

    pub fn observation_lag_ticks(&self) -> usize {
        to_ticks(self.omega_o, self.dt) as usize
    }

    /// Longest gap between deliveries when the leader publishes every tick.
    pub fn max_inter_arrival_ticks(&self) -> i64 {
        let (lo, hi) = self.state_delay_ticks();
        hi - lo + 1
    }
}

/// Draws ω_s in ticks: uniform on `[omega_s_min, omega_s_max]`, rounded to the grid.
pub fn sample_delay_ticks<R: Rng + ?Sized>(config: &DelayConfig, rng: &mut R) -> i64 {
    if config.omega_s_max <= config.omega_s_min {
        return to_ticks(config.omega_s_min, config.dt);
    }
    let u: f64 = rng.random_range(config.omega_s_min..=config.omega_s_max);
    to_ticks(u, config.dt)
}

pub fn sample_delay<R: Rng + ?Sized>(config: &DelayConfig, rng: &mut R) -> f64 {
    sample_delay_ticks(config, rng) as f64 * config.dt
}

/// A leader state in flight towards the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayedPacket {
    pub payload: JointState,
    pub send_time: f64,
    pub sampled_delay: f64,
    pub arrival_time: f64,
    pub send_tick: i64,
    pub delay_ticks: i64,
}

impl DelayedPacket {
    pub fn arrival_tick(&self) -> i64 {
        self.send_tick + self.delay_ticks
    }
}

/// Tracks the newest delivered send tick; accepts only strictly newer packets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StaleFilter {
    newest: Option<i64>,
}

impl StaleFilter {
    pub fn accept(&mut self, send_tick: i64) -> bool {
        match self.newest {
            Some(n) if send_tick <= n => false,
            _ => {
                self.newest = Some(send_tick);
                true
            }
        }
    }

    pub fn newest(&self) -> Option<i64> {
        self.newest
    }
}

#[derive(Clone, Debug)]
pub struct DelayChannel {
    config: DelayConfig,
    rng: ChaCha8Rng,
    in_flight: Vec<DelayedPacket>,
    last_push_tick: Option<i64>,
    filter: StaleFilter,
    dropped: usize,
    delivered: usize,
}

impl DelayChannel {
    pub fn new(config: DelayConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_flight: Vec::new(),
            last_push_tick: None,
            filter: StaleFilter::default(),
            dropped: 0,
            delivered: 0,
        }
    }

    pub fn config(&self) -> &DelayConfig {
        &self.config
    }

    /// Changes the ω_s bounds; packets already in flight keep their delay.
    pub fn set_state_delay_bounds(&mut self, min: f64, max: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.omega_s_min = min;
        c.omega_s_max = max;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    fn tick(&self, now: f64) -> i64 {
        to_ticks(now, self.config.dt)
    }

    /// Sends the leader state with a freshly sampled delay.
    pub fn push_state(&mut self, leader: JointState, now: f64) -> Result<&DelayedPacket> {
        let delay = sample_delay_ticks(&self.config, &mut self.rng);
        self.push_with_delay_ticks(leader, now, delay)
    }

    /// Sends with a caller-chosen delay (seconds, snapped to the grid).
    pub fn push_with_delay(&mut self, leader: JointState, now: f64, delay: f64) -> Result<&DelayedPacket> {
        let ticks = to_ticks(delay, self.config.dt);
        self.push_with_delay_ticks(leader, now, ticks)
    }

    fn push_with_delay_ticks(&mut self, leader: JointState, now: f64, delay_ticks: i64) -> Result<&DelayedPacket> {
        let tick = self.tick(now);
        if let Some(last) = self.last_push_tick {
            if tick < last {
                return Err(Error::TimeRegression { now, last: last as f64 * self.config.dt });
            }
        }
        self.last_push_tick = Some(tick);
        let dt = self.config.dt;
        self.in_flight.push(DelayedPacket {
            payload: leader,
            send_time: tick as f64 * dt,
            sampled_delay: delay_ticks as f64 * dt,
            arrival_time: (tick + delay_ticks) as f64 * dt,
            send_tick: tick,
            delay_ticks,
        });
        Ok(self.in_flight.last().expect("just pushed"))
    }

    /// Removes and returns every packet due by `now`, ordered by arrival time
    /// (ties by send time). Under `DropStale` packets older than something
    /// already delivered are discarded.
    pub fn poll_arrivals(&mut self, now: f64) -> Vec<DelayedPacket> {
        let tick = self.tick(now);
        let mut due = Vec::new();
        let mut i = 0;
        while i < self.in_flight.len() {
            if self.in_flight[i].arrival_tick() <= tick {
                due.push(self.in_flight.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by_key(|p| (p.arrival_tick(), p.send_tick));
        let out: Vec<DelayedPacket> = match self.config.reorder_policy {
            ReorderPolicy::DeliverInOrder => due,
            ReorderPolicy::DropStale => {
                let before = due.len();
                let kept: Vec<_> = due.into_iter().filter(|p| self.filter.accept(p.send_tick)).collect();
                self.dropped += before - kept.len();
                kept
            }
        };
        self.delivered += out.len();
        out
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn dropped_stale(&self) -> usize {
        self.dropped
    }

    pub fn delivered(&self) -> usize {
        self.delivered
    }
}

/// Result of a fixed-lag lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<'a, T> {
    pub value: &'a T,
    /// History did not reach back far enough; `value` is the oldest record.
    pub warm_up: bool,
}

/// Ring of per-tick records supporting constant-delay lookups.
#[derive(Clone, Debug)]
pub struct LagBuffer<T> {
    records: VecDeque<T>,
    capacity: usize,
}

impl<T> LagBuffer<T> {
    /// Keeps enough history for lags up to `max_lag_ticks`.
    pub fn new(max_lag_ticks: usize) -> Self {
        Self { records: VecDeque::with_capacity(max_lag_ticks + 1), capacity: max_lag_ticks + 1 }
    }

    pub fn push(&mut self, record: T) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The record pushed `lag_ticks` pushes ago (0 = latest).
    pub fn tap(&self, lag_ticks: usize) -> Option<Tap<'_, T>> {
        let len = self.records.len();
        if len == 0 {
            return None;
        }
        if lag_ticks < len {
            Some(Tap { value: &self.records[len - 1 - lag_ticks], warm_up: false })
        } else {
            Some(Tap { value: &self.records[0], warm_up: true })
        }
    }

    /// Lookup by a delay in seconds on a grid of `dt`.
    pub fn delayed_tap(&self, delay: f64, dt: f64) -> Option<Tap<'_, T>> {
        self.tap(to_ticks(delay, dt).max(0) as usize)
    }
}
