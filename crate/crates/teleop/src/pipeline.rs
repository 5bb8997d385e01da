//! Training stages and estimator evaluation behind the CLI subcommands.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teleop_core::control::train_sbsp;
use teleop_core::delay::{DelayChannel, DelayConfig};
use teleop_core::estimator::{closed_loop_validation, train_estimator, EstimatorNet};
use teleop_core::sac::{train_policy, training_env_config};
use teleop_core::trajectory::simulate_leader;

use crate::config::{delay_preset, Config};
use crate::io::{self, write_atomic};

/// Held-out trajectory/channel seeds for estimator evaluation.
pub const EVAL_ESTIMATOR_SEED_BASE: u64 = 0xE57_0000;

fn training_delays(cfg: &Config) -> anyhow::Result<Vec<DelayConfig>> {
    cfg.estimator.presets.iter().map(|p| delay_preset(p)).collect()
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner()?)
}

/// Leader episodes through the delay channel, one CSV per episode, using the
/// estimator's randomized-trajectory settings.
pub fn gen_data(cfg: &Config, out: &Path) -> anyhow::Result<usize> {
    let est = &cfg.estimator;
    let arm = &cfg.env.arm;
    let dt = cfg.env.dt();
    let steps = (est.episode_seconds / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(est.seed ^ 0x6e_da7a);
    let episodes = est.initial_episodes.max(1);
    let n = cfg.env.dof();
    for e in 0..episodes {
        let traj = est.ranges.sample(&mut rng, arm)?;
        let preset = &est.presets[e % est.presets.len()];
        let delay = DelayConfig { dt, ..delay_preset(preset)? };
        let states = simulate_leader(arm, &traj, steps, dt)?;
        let mut channel = DelayChannel::new(delay, est.seed.wrapping_add(e as u64));
        let mut rows = Vec::new();
        for (tick, s) in states.iter().enumerate() {
            let now = tick as f64 * dt;
            channel.push_state(s.clone(), now)?;
            let arrivals = channel.poll_arrivals(now);
            let last = arrivals.last();
            let mut row = vec![tick.to_string(), now.to_string()];
            row.extend(s.q.iter().chain(&s.qdot).map(|v| v.to_string()));
            row.push(last.map_or(String::new(), |p| p.send_time.to_string()));
            row.push(last.map_or(String::new(), |p| p.sampled_delay.to_string()));
            rows.push(row);
        }
        let mut header = vec!["tick".to_string(), "time".to_string()];
        header.extend((0..n).map(|i| format!("q{i}")));
        header.extend((0..n).map(|i| format!("qdot{i}")));
        header.extend(["arrived_send_time".to_string(), "arrived_delay".to_string()]);
        let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_atomic(&out.join("data").join(format!("episode_{e}_{preset}.csv")), &csv_bytes(&header, rows.into_iter())?)?;
    }
    Ok(episodes)
}

/// Trains the LSTM estimator and the state-buffer baseline model.
pub fn train_estimator_stage(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let arm = &cfg.env.arm;
    let mut progress = |e: &teleop_core::estimator::TrainLogEntry| {
        if let Some(v) = e.validation_error {
            log::info!("estimator update {} loss {:.5} tf {:.3} val {:.5} rad", e.update, e.loss, e.teacher_forcing, v);
        }
    };
    let trained = train_estimator(arm, &cfg.estimator, &mut progress)?;
    log::info!("estimator best validation {:.5} rad ({} skipped updates, {:.0} s)", trained.best_validation_error, trained.skipped_updates, t0.elapsed().as_secs_f64());
    io::save_checkpoint(&out.join(io::ESTIMATOR_FILE), &trained.net.to_checkpoint())?;
    let rows = trained.log.iter().map(|e| {
        vec![
            e.update.to_string(),
            e.loss.to_string(),
            e.teacher_forcing.to_string(),
            e.grad_norm.to_string(),
            e.validation_error.map_or(String::new(), |v| v.to_string()),
        ]
    });
    write_atomic(&out.join("estimator_curve.csv"), &csv_bytes(&["update", "loss", "teacher_forcing", "grad_norm", "validation_error"], rows)?)?;

    let (sbsp, losses) = train_sbsp(arm, &cfg.sbsp, cfg.env.dt())?;
    log::info!("sbsp final loss {:.3e}", losses.last().copied().unwrap_or(f64::NAN));
    io::save_checkpoint(&out.join(io::SBSP_FILE), &sbsp.to_checkpoint())?;
    let rows = losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]);
    write_atomic(&out.join("sbsp_curve.csv"), &csv_bytes(&["update", "loss"], rows)?)?;
    Ok(())
}

/// Trains the residual policy on top of the frozen estimator in `out`.
pub fn train_policy_stage(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    let net = Arc::new(io::load_estimator(out)?);
    let t0 = Instant::now();
    let mut progress = |p: &teleop_core::sac::CurvePoint| {
        log::info!("policy step {} validation {:.2} train {:.2} T {:.4} ({:.0} s)", p.step, p.validation_return, p.train_return, p.temperature, t0.elapsed().as_secs_f64());
    };
    let env = training_env_config(&cfg.env);
    let trained = train_policy(&env, &training_delays(cfg)?, net, &cfg.sac, &mut progress)?;
    log::info!(
        "policy best validation {:.2}; {} skipped updates, {} warm-up transitions excluded",
        trained.best_validation_return,
        trained.skipped_updates,
        trained.rejected_warm_up
    );
    io::save_checkpoint(&out.join(io::POLICY_FILE), &trained.params.to_checkpoint())?;
    let rows = trained.curve.iter().map(|p| {
        vec![
            p.step.to_string(),
            p.validation_return.to_string(),
            p.train_return.to_string(),
            p.critic_loss.to_string(),
            p.actor_loss.to_string(),
            p.temperature.to_string(),
        ]
    });
    write_atomic(&out.join("policy_curve.csv"), &csv_bytes(&["step", "validation_return", "train_return", "critic_loss", "actor_loss", "temperature"], rows)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetEstimatorEval {
    pub preset: String,
    pub episodes: usize,
    /// Mean over episodes of the per-episode mean ‖q̂ − q_l‖ (rad).
    pub mean_error: f64,
    pub max_error: f64,
    pub zoh_mean_error: f64,
    pub zoh_max_error: f64,
    /// 1 − mean/zoh_mean.
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEval {
    pub seconds: f64,
    pub seeds: Vec<u64>,
    pub presets: Vec<PresetEstimatorEval>,
}

/// Closed-loop estimator error vs holding the latest packet, on randomized
/// trajectories and channels drawn from held-out seeds.
pub fn eval_estimator(cfg: &Config, net: &Arc<EstimatorNet>, seconds: f64) -> anyhow::Result<EstimatorEval> {
    let arm = &cfg.env.arm;
    let mut presets = Vec::new();
    for name in &cfg.bench.presets {
        let delay = delay_preset(name)?;
        let (mut mean, mut zmean, mut max, mut zmax) = (0.0, 0.0, 0.0f64, 0.0f64);
        for s in &cfg.bench.seeds {
            let seed = EVAL_ESTIMATOR_SEED_BASE + s;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = cfg.estimator.ranges.sample(&mut rng, arm)?;
            let r = closed_loop_validation(net, arm, &traj, &delay, seed, seconds)?;
            mean += r.mean_error;
            zmean += r.zoh_mean_error;
            max = max.max(r.max_error);
            zmax = zmax.max(r.zoh_max_error);
        }
        let k = cfg.bench.seeds.len() as f64;
        let (mean, zmean) = (mean / k, zmean / k);
        presets.push(PresetEstimatorEval {
            preset: name.clone(),
            episodes: cfg.bench.seeds.len(),
            mean_error: mean,
            max_error: max,
            zoh_mean_error: zmean,
            zoh_max_error: zmax,
            reduction: 1.0 - mean / zmean,
        });
    }
    Ok(EstimatorEval { seconds, seeds: cfg.bench.seeds.clone(), presets })
}
