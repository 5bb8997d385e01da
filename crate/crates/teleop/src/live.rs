//! Real-time operator session.
//!
//! `LiveSession` is the whole simulation, driven one tick at a time; it holds
//! no clocks or sockets. `serve` wraps it in a 250 Hz control thread and a
//! WebSocket transport. Simulation ticks, not wall time, drive the delay
//! channel, so a scripted command sequence always replays identically.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use teleop_core::env::{EnvConfig, Method, StepInfo, TeleopEnv, TrajectoryMode};
use teleop_core::eval::{residual_action, Models};
use tokio::sync::broadcast;

use crate::config::{delay_preset, ServeConfig};
use crate::wire::{self, ActiveDelays, ArmState, Role, Sequencer, Snapshot, WireMessage};

/// Live sessions never time out on their own.
const SESSION_SECONDS: f64 = 1.0e7;

pub struct LiveSession {
    env: TeleopEnv,
    models: Models,
    preset: String,
    target: [f64; 2],
    residual: Vec<f64>,
    last: Option<StepInfo>,
}

impl LiveSession {
    pub fn new(base: &EnvConfig, models: Models, method: Method, preset: &str, seed: u64) -> anyhow::Result<Self> {
        if let Some(m) = models.missing_for(method) {
            bail!("method {} needs the {m} checkpoint", method.name());
        }
        let target = [0.55 * base.arm.reach(), 0.0];
        let cfg = EnvConfig {
            delay: delay_preset(preset)?,
            trajectory: TrajectoryMode::Target { x: target[0], y: target[1] },
            episode_seconds: SESSION_SECONDS,
            safety_steps: 0,
            ..base.clone()
        };
        let mut env = TeleopEnv::new(cfg, method, models.estimator.clone(), models.sbsp.clone())?;
        env.set_run_all_predictors(true);
        env.reset(seed)?;
        let n = base.dof();
        Ok(Self { env, models, preset: preset.to_string(), target, residual: vec![0.0; n], last: None })
    }

    pub fn env(&self) -> &TeleopEnv {
        &self.env
    }

    pub fn method(&self) -> Method {
        self.env.method()
    }

    pub fn preset(&self) -> &str {
        &self.preset
    }

    /// Applies one client command. Server-side frame types are rejected.
    pub fn apply(&mut self, msg: &WireMessage) -> anyhow::Result<()> {
        match msg {
            WireMessage::LeaderTarget { x, y, .. } => {
                if !(x.is_finite() && y.is_finite()) {
                    bail!("leader target must be finite");
                }
                self.target = [*x, *y];
                self.env.set_leader_target(self.target);
            }
            WireMessage::DelayPreset { name, min, max } => {
                let (label, lo, hi) = match (name, min, max) {
                    (Some(n), None, None) => {
                        let d = delay_preset(n)?;
                        let cur = &self.env.config().delay;
                        if d.omega_a != cur.omega_a || d.omega_o != cur.omega_o {
                            bail!("preset {n} changes the fixed actuation/observation lags; restart the server with --preset {n}");
                        }
                        (n.clone(), d.omega_s_min, d.omega_s_max)
                    }
                    (None, Some(lo), Some(hi)) => ("custom".to_string(), *lo, *hi),
                    _ => bail!("delay_preset needs either `name` or both `min` and `max`"),
                };
                self.env.set_delay_bounds(lo, hi)?;
                self.preset = label;
            }
            WireMessage::MethodSelect { method } => {
                if let Some(m) = self.models.missing_for(*method) {
                    bail!("method {} is unavailable: no {m} checkpoint loaded", method.name());
                }
                self.env.set_method(*method)?;
            }
            WireMessage::Reset { seed } => {
                self.env.reset(*seed)?;
                self.target = [0.55 * self.env.config().arm.reach(), 0.0];
                self.residual.iter_mut().for_each(|r| *r = 0.0);
                self.last = None;
            }
            other => bail!("{} frames are server-to-client only", frame_kind(other)),
        }
        Ok(())
    }

    /// One control period; returns the applied joint torques.
    pub fn tick(&mut self) -> anyhow::Result<&[f64]> {
        let obs = self.env.build_observation();
        self.residual = residual_action(&self.models, self.env.method(), &obs.values).unwrap_or_else(|| vec![0.0; self.residual.len()]);
        let r = self.env.step(&self.residual)?;
        self.last = Some(r.info);
        Ok(&self.last.as_ref().expect("just set").applied_torque)
    }

    pub fn snapshot(&self) -> Snapshot {
        let arm = &self.env.config().arm;
        let d = &self.env.config().delay;
        let est = self.env.estimate();
        let est_state = teleop_core::arm::JointState { q: est.q.clone(), qdot: est.qdot.clone(), t: self.env.time() };
        let (reward, torque, cartesian_error, last) = match &self.last {
            Some(i) => (i.reward.clone(), i.applied_torque.clone(), i.cartesian_error, i.last_delay),
            None => (Default::default(), vec![0.0; self.residual.len()], 0.0, None),
        };
        Snapshot {
            tick: self.env.tick(),
            time: self.env.time(),
            method: self.env.method(),
            target: self.target,
            leader: ArmState::new(arm, self.env.leader_state()),
            follower: ArmState::new(arm, self.env.follower_state()),
            estimate: ArmState::new(arm, &est_state),
            cartesian_error,
            reward,
            torque,
            residual: self.residual.clone(),
            delays: ActiveDelays {
                preset: self.preset.clone(),
                omega_s_min: d.omega_s_min,
                omega_s_max: d.omega_s_max,
                omega_a: d.omega_a,
                omega_o: d.omega_o,
                last,
            },
        }
    }
}

fn frame_kind(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::LeaderTarget { .. } => "leader_target",
        WireMessage::DelayPreset { .. } => "delay_preset",
        WireMessage::MethodSelect { .. } => "method_select",
        WireMessage::Reset { .. } => "reset",
        WireMessage::Hello { .. } => "hello",
        WireMessage::Snapshot(_) => "snapshot",
        WireMessage::Error { .. } => "error",
    }
}

/// A command applied before the given tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub tick: usize,
    pub msg: WireMessage,
}

/// Runs `ticks` control periods with commands applied at their ticks and
/// returns the applied torque stream.
pub fn replay(session: &mut LiveSession, script: &[ScriptedCommand], ticks: usize) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ticks);
    let mut next = 0;
    for k in 0..ticks {
        while next < script.len() && script[next].tick <= k {
            session.apply(&script[next].msg)?;
            next += 1;
        }
        out.push(session.tick()?.to_vec());
    }
    Ok(out)
}

// ---------------------------------------------------------------- timing

/// Per-tick compute time histogram (0.1 ms bins up to 10 ms, then overflow).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub ticks: u64,
    pub overruns: u64,
    pub budget_ms: f64,
    pub bin_ms: f64,
    pub histogram: Vec<u64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

const BINS: usize = 100;
const BIN_MS: f64 = 0.1;

impl TimingReport {
    pub fn new(budget_ms: f64) -> Self {
        Self { ticks: 0, overruns: 0, budget_ms, bin_ms: BIN_MS, histogram: vec![0; BINS + 1], mean_ms: 0.0, p50_ms: 0.0, p99_ms: 0.0, max_ms: 0.0 }
    }

    pub fn record(&mut self, ms: f64) {
        self.ticks += 1;
        if ms > self.budget_ms {
            self.overruns += 1;
        }
        let bin = ((ms / BIN_MS) as usize).min(BINS);
        self.histogram[bin] += 1;
        self.mean_ms += (ms - self.mean_ms) / self.ticks as f64;
        self.max_ms = self.max_ms.max(ms);
        self.p50_ms = self.quantile(0.50);
        self.p99_ms = self.quantile(0.99);
    }

    /// Upper edge of the bin holding the q-quantile (max for the overflow bin).
    pub fn quantile(&self, q: f64) -> f64 {
        if self.ticks == 0 {
            return 0.0;
        }
        let want = (q * self.ticks as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (i, c) in self.histogram.iter().enumerate() {
            seen += c;
            if seen >= want {
                return if i == BINS { self.max_ms } else { (i + 1) as f64 * BIN_MS };
            }
        }
        self.max_ms
    }
}

// ---------------------------------------------------------------- server

pub struct ServeOptions {
    pub serve: ServeConfig,
    pub seed: u64,
    /// Stop after this much wall time (None: until Ctrl-C).
    pub duration: Option<Duration>,
    pub ui_dir: Option<PathBuf>,
    /// Extra sleep per tick, for overrun testing.
    pub inject_sleep: Option<Duration>,
}

enum Command {
    Apply(WireMessage),
}

struct Shared {
    snapshots: broadcast::Sender<Arc<Snapshot>>,
    commands: SyncSender<Command>,
    latest_target: Mutex<Option<WireMessage>>,
    errors: broadcast::Sender<String>,
    operator: AtomicBool,
    timing: Mutex<TimingReport>,
    hello: Mutex<(Method, String)>,
    link_lengths: Vec<f64>,
    dt: f64,
    /// Flips to true when the server shuts down; ends client sessions.
    closing: tokio::sync::watch::Sender<bool>,
}

/// Bounded outbound queue; slow readers lose the oldest snapshots.
const SNAPSHOT_QUEUE: usize = 64;
const COMMAND_QUEUE: usize = 64;

fn control_loop(mut session: LiveSession, shared: Arc<Shared>, rx: Receiver<Command>, opts_div: usize, inject: Option<Duration>, stop: Arc<AtomicBool>) {
    let dt = Duration::from_secs_f64(shared.dt);
    let mut next = Instant::now();
    let mut k: usize = 0;
    while !stop.load(Ordering::Relaxed) {
        let start = Instant::now();
        loop {
            match rx.try_recv() {
                Ok(Command::Apply(msg)) => {
                    if let Err(e) = session.apply(&msg) {
                        let _ = shared.errors.send(format!("{e:#}"));
                    }
                }
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        if let Some(t) = shared.latest_target.lock().expect("target lock").take() {
            if let Err(e) = session.apply(&t) {
                let _ = shared.errors.send(format!("{e:#}"));
            }
        }
        if let Err(e) = session.tick() {
            log::error!("control tick failed: {e:#}; resetting");
            let _ = shared.errors.send(format!("control tick failed: {e:#}; session reset"));
            let _ = session.apply(&WireMessage::Reset { seed: session.env().episode_seed() });
        }
        if let Some(s) = inject {
            std::thread::sleep(s);
        }
        if k % opts_div == 0 {
            *shared.hello.lock().expect("hello lock") = (session.method(), session.preset().to_string());
            // no receivers is fine
            let _ = shared.snapshots.send(Arc::new(session.snapshot()));
        }
        shared.timing.lock().expect("timing lock").record(start.elapsed().as_secs_f64() * 1e3);
        k += 1;
        next += dt;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else {
            // behind schedule: don't try to catch up with a burst
            next = now;
        }
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, shared))
}

async fn timing_handler(State(shared): State<Arc<Shared>>) -> Json<TimingReport> {
    Json(shared.timing.lock().expect("timing lock").clone())
}

async fn client(socket: WebSocket, shared: Arc<Shared>) {
    let operator = shared.operator.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok();
    let role = if operator { Role::Operator } else { Role::Observer };
    let (mut tx, mut rx) = socket.split();
    let mut seq = Sequencer::default();
    let mut snaps = shared.snapshots.subscribe();
    let mut errors = shared.errors.subscribe();
    let mut closing = shared.closing.subscribe();
    let (method, preset) = shared.hello.lock().expect("hello lock").clone();
    let hello = seq.frame(WireMessage::Hello { role, method, preset, dt: shared.dt, link_lengths: shared.link_lengths.clone() });
    if tx.send(Message::Text(wire::encode(&hello).into())).await.is_err() {
        release(&shared, operator);
        return;
    }
    loop {
        if *closing.borrow() {
            let _ = tx.send(Message::Close(None)).await;
            break;
        }
        let out = tokio::select! {
            _ = closing.changed() => continue,
            s = snaps.recv() => match s {
                Ok(s) => Some(WireMessage::Snapshot(Box::new((*s).clone()))),
                Err(broadcast::error::RecvError::Lagged(_)) => None,
                Err(broadcast::error::RecvError::Closed) => break,
            },
            e = errors.recv(), if operator => match e {
                Ok(message) => Some(WireMessage::Error { message }),
                Err(broadcast::error::RecvError::Lagged(_)) => None,
                Err(broadcast::error::RecvError::Closed) => break,
            },
            m = rx.next() => match m {
                Some(Ok(Message::Text(t))) => inbound(&shared, operator, t.as_str()),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => None,
            },
        };
        if let Some(msg) = out {
            if tx.send(Message::Text(wire::encode(&seq.frame(msg)).into())).await.is_err() {
                break;
            }
        }
    }
    release(&shared, operator);
}

fn release(shared: &Shared, operator: bool) {
    if operator {
        shared.operator.store(false, Ordering::SeqCst);
    }
}

/// Routes one inbound text frame; returns an error frame for the sender if it is rejected.
fn inbound(shared: &Shared, operator: bool, text: &str) -> Option<WireMessage> {
    let frame = match wire::decode(text) {
        Ok(f) => f,
        Err(e) => return Some(WireMessage::Error { message: e.to_string() }),
    };
    if !operator {
        return Some(WireMessage::Error { message: "read-only session: another client is the operator".into() });
    }
    match frame.msg {
        m @ WireMessage::LeaderTarget { .. } => {
            *shared.latest_target.lock().expect("target lock") = Some(m);
            None
        }
        m @ (WireMessage::DelayPreset { .. } | WireMessage::MethodSelect { .. } | WireMessage::Reset { .. }) => {
            match shared.commands.try_send(Command::Apply(m)) {
                Ok(()) => None,
                Err(TrySendError::Full(_)) => Some(WireMessage::Error { message: "command queue full; retry".into() }),
                Err(TrySendError::Disconnected(_)) => Some(WireMessage::Error { message: "control loop stopped".into() }),
            }
        }
        other => Some(WireMessage::Error { message: format!("{} frames are server-to-client only", frame_kind(&other)) }),
    }
}

/// Binds `opts.serve.bind` and runs until Ctrl-C or `opts.duration`.
pub async fn serve(base: &EnvConfig, models: Models, opts: ServeOptions) -> anyhow::Result<TimingReport> {
    let addr: SocketAddr = opts.serve.bind.parse().with_context(|| format!("invalid bind address `{}`", opts.serve.bind))?;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    serve_listener(listener, base, models, opts).await
}

/// Runs the server on an already-bound listener; returns the loop timing.
pub async fn serve_listener(listener: tokio::net::TcpListener, base: &EnvConfig, models: Models, opts: ServeOptions) -> anyhow::Result<TimingReport> {
    let sc = &opts.serve;
    let session = LiveSession::new(base, models, sc.method, &sc.preset, opts.seed)?;
    let local = listener.local_addr()?;
    let (cmd_tx, cmd_rx) = sync_channel(COMMAND_QUEUE);
    let shared = Arc::new(Shared {
        snapshots: broadcast::channel(SNAPSHOT_QUEUE).0,
        commands: cmd_tx,
        latest_target: Mutex::new(None),
        errors: broadcast::channel(16).0,
        operator: AtomicBool::new(false),
        timing: Mutex::new(TimingReport::new(sc.tick_budget_ms)),
        hello: Mutex::new((session.method(), session.preset().to_string())),
        link_lengths: base.arm.link_lengths.clone(),
        dt: base.dt(),
        closing: tokio::sync::watch::channel(false).0,
    });
    let stop = Arc::new(AtomicBool::new(false));
    let control = {
        let (shared, stop, div, inject) = (shared.clone(), stop.clone(), sc.snapshot_div, opts.inject_sleep);
        std::thread::Builder::new().name("control".into()).spawn(move || control_loop(session, shared, cmd_rx, div, inject, stop))?
    };
    let mut app = Router::new().route("/ws", get(ws_handler)).route("/timing", get(timing_handler));
    if let Some(dir) = &opts.ui_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let app = app.with_state(shared.clone());
    log::info!("listening on ws://{local}/ws (timing at http://{local}/timing)");
    let duration = opts.duration;
    let closing = shared.clone();
    let shutdown = async move {
        match duration {
            Some(d) => tokio::time::sleep(d).await,
            None => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
        closing.closing.send_replace(true);
    };
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    stop.store(true, Ordering::Relaxed);
    let _ = control.join();
    result?;
    let report = shared.timing.lock().expect("timing lock").clone();
    Ok(report)
}
