//! Leader reference trajectories and the simulated leader arm that tracks them.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmParams, DisturbanceSpec, JointState};
use crate::control::{self, GainConfig};
use crate::linalg;
use crate::{Error, Result};

/// Planar Lissajous path
/// x = c_x + s_x sin(2π f a (k + k₀) + φ_x), y = c_y + s_y sin(2π f b (k + k₀) + φ_y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub center: [f64; 2],
    pub scale: [f64; 2],
    /// Base frequency in Hz.
    pub frequency: f64,
    /// Integer frequency multipliers (a, b).
    pub ratio: [f64; 2],
    pub phase: [f64; 2],
    /// Time shift k₀ (s), so episodes can start anywhere along the path.
    #[serde(default)]
    pub time_offset: f64,
}

impl TrajectoryParams {
    /// The evaluation path: (3, 4) Lissajous, 0.2 m amplitude, ω = 1 rad/s base.
    pub fn benchmark() -> Self {
        Self {
            center: [0.6, 0.0],
            scale: [0.2, 0.2],
            frequency: 1.0 / (2.0 * PI),
            ratio: [3.0, 4.0],
            phase: [0.0, FRAC_PI_2],
            time_offset: 0.0,
        }
    }

    /// A (1, 2) figure-8. With both phases zero the curve crosses itself at the center.
    pub fn figure8(center: [f64; 2], scale: f64, frequency: f64, time_offset: f64) -> Self {
        Self { center, scale: [scale, scale], frequency, ratio: [1.0, 2.0], phase: [0.0, 0.0], time_offset }
    }

    pub fn stationary(point: [f64; 2]) -> Self {
        Self { center: point, scale: [0.0, 0.0], frequency: 0.0, ratio: [1.0, 1.0], phase: [0.0, 0.0], time_offset: 0.0 }
    }

    fn angle(&self, axis: usize, k: f64) -> (f64, f64) {
        let w = 2.0 * PI * self.frequency * self.ratio[axis];
        (w * (k + self.time_offset) + self.phase[axis], w)
    }

    /// Position, velocity and acceleration of the reference at time `k`.
    pub fn evaluate(&self, k: f64) -> [[f64; 2]; 3] {
        let mut out = [[0.0; 2]; 3];
        for axis in 0..2 {
            let (th, w) = self.angle(axis, k);
            let s = self.scale[axis];
            out[0][axis] = self.center[axis] + s * th.sin();
            out[1][axis] = s * w * th.cos();
            out[2][axis] = -s * w * w * th.sin();
        }
        out
    }

    /// Period of the closed path (s); infinite for a stationary point.
    pub fn period(&self) -> f64 {
        if self.frequency == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.frequency
        }
    }

    /// True if every point of one period lies inside the annulus shrunk by
    /// `margin`·reach on both sides.
    pub fn within_workspace(&self, params: &ArmParams, margin: f64) -> bool {
        let lo = params.inner_reach() + margin * params.reach();
        let hi = (1.0 - margin) * params.reach();
        let samples = 512;
        let period = if self.period().is_finite() { self.period() } else { 1.0 };
        (0..samples).all(|i| {
            let p = leader_reference(i as f64 * period / samples as f64, self);
            let r = linalg::norm(&p);
            r >= lo && r <= hi
        })
    }
}

/// End-effector target at time `k`.
pub fn leader_reference(k: f64, params: &TrajectoryParams) -> [f64; 2] {
    params.evaluate(k)[0]
}

/// Sampling ranges for randomized training paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryRanges {
    pub center_x: [f64; 2],
    pub center_y: [f64; 2],
    pub scale: [f64; 2],
    pub frequency: [f64; 2],
}

impl Default for TrajectoryRanges {
    /// Rescaled to the default 1.1 m two-link arm.
    fn default() -> Self {
        Self { center_x: [0.5, 0.7], center_y: [-0.15, 0.15], scale: [0.1, 0.25], frequency: [0.05, 0.35] }
    }
}

pub const WORKSPACE_MARGIN: f64 = 0.05;

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl TrajectoryRanges {
    /// Samples a figure-8 that fits the workspace with the standard margin.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, params: &ArmParams) -> Result<TrajectoryParams> {
        for _ in 0..1000 {
            let f = draw(rng, self.frequency);
            let t = TrajectoryParams::figure8(
                [draw(rng, self.center_x), draw(rng, self.center_y)],
                draw(rng, self.scale),
                f,
                rng.random_range(0.0..1.0) / f.max(1e-9),
            );
            if t.within_workspace(params, WORKSPACE_MARGIN) {
                return Ok(t);
            }
        }
        Err(Error::InvalidParam("trajectory ranges do not fit the arm workspace".into()))
    }
}

/// Joint-space reference obtained by seed-continuous IK.
#[derive(Clone, Debug)]
pub struct JointReference {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qddot: Vec<f64>,
}

/// Default IK seed: elbow bent positively, which keeps the default paths
/// away from the stretched singularity.
pub fn default_seed(n: usize) -> Vec<f64> {
    let mut q = vec![0.0; n];
    if n >= 2 {
        q[0] = -0.6;
        q[1] = 1.2;
    }
    q
}

/// Maps a Cartesian reference sample to joint space, continuing from `seed`.
pub fn joint_reference(params: &ArmParams, x: &[[f64; 2]; 3], seed: &[f64]) -> Result<JointReference> {
    let q = arm::inverse_kinematics(params, x[0], seed)?.q;
    let j = arm::jacobian(params, &q);
    // small damping only matters close to singular poses
    let qdot = arm::damped_pinv_apply(&j, x[1], 1e-4);
    let jdqd = arm::jacobian_dot_qdot(params, &q, &qdot);
    let qddot = arm::damped_pinv_apply(&j, [x[2][0] - jdqd[0], x[2][1] - jdqd[1]], 1e-4);
    Ok(JointReference { q, qdot, qddot })
}

/// How the leader's motion is commanded.
#[derive(Clone, Debug, PartialEq)]
pub enum LeaderDrive {
    /// Follow a parametric path.
    Reference(TrajectoryParams),
    /// Hold or move toward an operator-supplied Cartesian point.
    Target([f64; 2]),
}

/// The leader arm: a simulated plant tracking its reference with an
/// undelayed computed-torque loop.
#[derive(Clone, Debug)]
pub struct Leader {
    pub arm: ArmParams,
    pub gains: GainConfig,
    pub drive: LeaderDrive,
    pub state: JointState,
    ik_seed: Vec<f64>,
    /// Low-passed target for `LeaderDrive::Target` (position, velocity).
    target_filter: Option<([f64; 2], [f64; 2])>,
}

impl Leader {
    pub fn new(arm: ArmParams, gains: GainConfig, drive: LeaderDrive, t0: f64) -> Result<Self> {
        let n = arm.n_links();
        let seed = default_seed(n);
        let (q, qdot, filter) = match &drive {
            LeaderDrive::Reference(p) => {
                let r = joint_reference(&arm, &p.evaluate(t0), &seed)?;
                (r.q, r.qdot, None)
            }
            LeaderDrive::Target(x) => {
                let q = arm::inverse_kinematics(&arm, *x, &seed)?.q;
                (q, vec![0.0; n], Some((*x, [0.0; 2])))
            }
        };
        Ok(Self { arm, gains, drive, state: JointState::new(q.clone(), qdot, t0), ik_seed: q, target_filter: filter })
    }

    /// Switches to (or updates) an operator target; the reference is smoothed
    /// by a critically damped second-order filter so the leader never sees a step.
    pub fn set_target(&mut self, x: [f64; 2]) {
        if self.target_filter.is_none() {
            self.target_filter = Some((arm::forward_kinematics(&self.arm, &self.state.q), [0.0; 2]));
        }
        self.drive = LeaderDrive::Target(x);
    }

    fn current_reference(&mut self, dt: f64) -> Result<JointReference> {
        let t = self.state.t;
        let x = match &self.drive {
            LeaderDrive::Reference(p) => p.evaluate(t),
            LeaderDrive::Target(goal) => {
                let (mut p, mut v) = self.target_filter.unwrap_or((*goal, [0.0; 2]));
                let wn: f64 = 6.0;
                let mut a = [0.0; 2];
                for i in 0..2 {
                    a[i] = wn * wn * (goal[i] - p[i]) - 2.0 * wn * v[i];
                    v[i] += a[i] * dt;
                    p[i] += v[i] * dt;
                }
                let (p, _) = arm::project_to_annulus(&self.arm, p);
                self.target_filter = Some((p, v));
                [p, v, a]
            }
        };
        let r = joint_reference(&self.arm, &x, &self.ik_seed)?;
        self.ik_seed = r.q.clone();
        Ok(r)
    }

    /// Advances the leader by one tick and returns its new state.
    pub fn step(&mut self, dt: f64) -> Result<&JointState> {
        let r = self.current_reference(dt)?;
        let qdd = control::reference_accel(&r.q, &r.qdot, &r.qddot, &self.state, &self.gains);
        let tau = control::computed_torque(&self.arm, &self.state, &qdd)?;
        self.state = arm::step(&self.arm, &self.state, &tau, &DisturbanceSpec::none(), dt)?;
        Ok(&self.state)
    }
}

/// Simulates the leader for `steps` ticks and returns every state, starting with the initial one.
pub fn simulate_leader(arm: &ArmParams, traj: &TrajectoryParams, steps: usize, dt: f64) -> Result<Vec<JointState>> {
    let n = arm.n_links();
    let mut leader = Leader::new(arm.clone(), GainConfig::leader_default(n), LeaderDrive::Reference(traj.clone()), 0.0)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(leader.state.clone());
    for _ in 0..steps {
        out.push(leader.step(dt)?.clone());
    }
    Ok(out)
}
