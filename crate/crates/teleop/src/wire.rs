//! JSON text frames exchanged with the operator console.
//!
//! Every frame is one object: `{"v": 1, "seq": N, "type": "...", ...fields}`.
//! `seq` increases strictly per sender. Schema and example frames are listed
//! in `docs/wire.md`.

use serde::{Deserialize, Serialize};
use teleop_core::arm::JointState;
use teleop_core::env::{Method, RewardBreakdown};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub msg: WireMessage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    // client → server
    LeaderTarget { x: f64, y: f64, client_time: f64 },
    /// Either a named preset or explicit ω_s bounds (s).
    DelayPreset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    MethodSelect { method: Method },
    Reset { seed: u64 },
    // server → client
    Hello { role: Role, method: Method, preset: String, dt: f64, link_lengths: Vec<f64> },
    Snapshot(Box<Snapshot>),
    Error { message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// End-effector position (m).
    pub ee: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveDelays {
    pub preset: String,
    pub omega_s_min: f64,
    pub omega_s_max: f64,
    pub omega_a: f64,
    pub omega_o: f64,
    /// Delay of the most recently delivered leader packet.
    pub last: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: usize,
    pub time: f64,
    pub method: Method,
    pub target: [f64; 2],
    pub leader: ArmState,
    pub follower: ArmState,
    pub estimate: ArmState,
    pub cartesian_error: f64,
    pub reward: RewardBreakdown,
    pub torque: Vec<f64>,
    pub residual: Vec<f64>,
    pub delays: ActiveDelays,
}

impl ArmState {
    pub fn new(arm: &teleop_core::arm::ArmParams, s: &JointState) -> Self {
        Self { q: s.q.clone(), qdot: s.qdot.clone(), ee: teleop_core::arm::forward_kinematics(arm, &s.q) }
    }
}

/// Assigns strictly increasing sequence numbers.
#[derive(Debug, Default)]
pub struct Sequencer {
    next: u64,
}

impl Sequencer {
    pub fn frame(&mut self, msg: WireMessage) -> Frame {
        let seq = self.next;
        self.next += 1;
        Frame { v: PROTOCOL_VERSION, seq, msg }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported protocol version {0}; server speaks {PROTOCOL_VERSION}")]
    Version(u32),
}

pub fn decode(text: &str) -> Result<Frame, DecodeError> {
    let f: Frame = serde_json::from_str(text)?;
    if f.v != PROTOCOL_VERSION {
        return Err(DecodeError::Version(f.v));
    }
    Ok(f)
}

pub fn encode(frame: &Frame) -> String {
    serde_json::to_string(frame).expect("frames serialize")
}
