//! Three-preset benchmark and its outputs.
//!
//! `report.json` holds only reproducible content (config, seeds, metrics,
//! checkpoint digests); wall-clock timing goes to `timing.json` so that a
//! re-run with the same inputs is byte-identical.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use teleop_core::env::Method;
use teleop_core::eval::{self, CellSummary, EpisodeResult, Models};

use crate::config::{delay_preset, Config};
use crate::io::write_atomic;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub per_seed_mean: Vec<f64>,
    /// Mean of per-seed mean Cartesian errors (m).
    pub mean: f64,
    /// Pooled over all seeds (m).
    pub p95: f64,
    pub max: f64,
    pub std: f64,
    pub steps_per_episode: usize,
    /// Mean joint-space estimation error ‖q̂ − q_l‖ (rad).
    pub estimation_mean: f64,
    pub diverged_runs: usize,
}

impl From<&CellSummary> for CellReport {
    fn from(s: &CellSummary) -> Self {
        Self {
            method: s.method,
            preset: s.preset.clone(),
            seeds: s.seeds.clone(),
            per_seed_mean: s.per_seed_mean.clone(),
            mean: s.cartesian.mean,
            p95: s.cartesian.p95,
            max: s.cartesian.max,
            std: s.cartesian.std,
            steps_per_episode: s.cartesian.count / s.seeds.len().max(1),
            estimation_mean: s.estimation_mean,
            diverged_runs: s.diverged_runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: u32,
    pub config_hash: String,
    pub methods: Vec<Method>,
    pub presets: Vec<String>,
    pub seeds: Vec<u64>,
    pub eval_seconds: f64,
    /// (file, sha256) of every checkpoint used.
    pub checkpoints: Vec<(String, String)>,
    pub cells: Vec<CellReport>,
    pub config: Config,
}

impl BenchmarkReport {
    pub fn cell(&self, method: Method, preset: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.preset == preset)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    /// (method, preset, seed, seconds)
    pub runs: Vec<(Method, String, u64, f64)>,
}

pub struct BenchOutput {
    pub report: BenchmarkReport,
    pub runs: Vec<(Method, String, EpisodeResult)>,
    pub timing: Timing,
}

/// Runs every (method, preset, seed) cell; each owns its environment.
pub fn run_benchmark(config: &Config, models: &Models, checkpoints: Vec<(String, String)>) -> anyhow::Result<BenchOutput> {
    let b = &config.bench;
    for m in &b.methods {
        if let Some(missing) = models.missing_for(*m) {
            anyhow::bail!("method {} needs the {missing} checkpoint", m.name());
        }
    }
    let mut jobs = Vec::new();
    for m in &b.methods {
        for p in &b.presets {
            for s in &b.seeds {
                jobs.push((*m, p.clone(), *s));
            }
        }
    }
    let t0 = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(b.workers).build()?;
    let results: Vec<anyhow::Result<(Method, String, EpisodeResult, f64)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(m, p, s)| {
                let start = Instant::now();
                let cfg = eval::eval_env_config(&config.env, &delay_preset(p)?, b.eval_seconds);
                let r = eval::run_episode(&cfg, *m, models, *s).with_context(|| format!("{} / {p} / seed {s}", m.name()))?;
                Ok((*m, p.clone(), r, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    let mut timing = Timing::default();
    for r in results {
        let (m, p, ep, secs) = r?;
        timing.runs.push((m, p.clone(), ep.seed, secs));
        runs.push((m, p, ep));
    }
    timing.total_seconds = t0.elapsed().as_secs_f64();

    let mut cells = Vec::new();
    for m in &b.methods {
        for p in &b.presets {
            let eps: Vec<EpisodeResult> = runs.iter().filter(|(rm, rp, _)| rm == m && rp == p).map(|(_, _, e)| e.clone()).collect();
            cells.push(CellReport::from(&eval::summarize(*m, p, &eps)));
        }
    }
    let report = BenchmarkReport {
        version: REPORT_VERSION,
        config_hash: config.hash(),
        methods: b.methods.clone(),
        presets: b.presets.clone(),
        seeds: b.seeds.clone(),
        eval_seconds: b.eval_seconds,
        checkpoints,
        cells,
        config: config.clone(),
    };
    Ok(BenchOutput { report, runs, timing })
}

/// Aligned plain-text table (errors in metres).
pub fn format_table(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Cartesian tracking error (m) over {} s, seeds {:?}", report.eval_seconds, report.seeds);
    let _ = writeln!(s, "config {}", report.config_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:<10} {:>10} {:>10} {:>10} {:>10} {:>10}", "method", "preset", "mean", "p95", "max", "std", "est_rad");
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{:<8} {:<10} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            c.method.name(),
            c.preset,
            c.mean,
            c.p95,
            c.max,
            c.std,
            c.estimation_mean
        );
    }
    s
}

pub const TRACE_HEADER: [&str; 10] =
    ["tick", "time", "cartesian_error", "est_error", "track_error", "leader_q", "follower_q", "estimate_q", "residual", "reward"];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Per-step CSV; floats use shortest round-trip formatting.
pub fn write_trace(path: &Path, ep: &EpisodeResult) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER)?;
    for r in &ep.trace {
        w.write_record([
            r.tick.to_string(),
            r.time.to_string(),
            r.cartesian_error.to_string(),
            r.est_error.to_string(),
            r.track_error.to_string(),
            join(&r.leader_q),
            join(&r.follower_q),
            join(&r.estimate_q),
            join(&r.residual),
            r.reward.to_string(),
        ])?;
    }
    write_atomic(path, &w.into_inner()?)
}

pub fn write_delays(path: &Path, preset: &str, seed: u64, seconds: f64) -> anyhow::Result<()> {
    let trace = eval::delay_trace(&delay_preset(preset)?, seed, seconds)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["send_time", "delay", "arrival_time"])?;
    for d in trace {
        w.write_record([d.send_time.to_string(), d.delay.to_string(), d.arrival_time.to_string()])?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// report.json, report.txt, traces/, delays_<preset>.csv and timing.json.
pub fn emit_outputs(out: &Path, bench: &BenchOutput) -> anyhow::Result<()> {
    let r = &bench.report;
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(r)?.as_bytes())?;
    write_atomic(&out.join("report.txt"), format_table(r).as_bytes())?;
    for (m, p, ep) in &bench.runs {
        write_trace(&out.join("traces").join(format!("{}_{}_{}.csv", m.name(), p, ep.seed)), ep)?;
    }
    for p in &r.presets {
        write_delays(&out.join(format!("delays_{p}.csv")), p, r.seeds[0], r.eval_seconds)?;
    }
    write_atomic(&out.join("timing.json"), serde_json::to_string_pretty(&bench.timing)?.as_bytes())?;
    Ok(())
}

/// Recomputes the Cartesian metrics of one trace file (mean, p95, max, std).
pub fn metrics_from_trace(path: &Path) -> anyhow::Result<teleop_core::metrics::ErrorStats> {
    let mut rd = csv::Reader::from_path(path)?;
    let col = rd.headers()?.iter().position(|h| h == "cartesian_error").context("no cartesian_error column")?;
    let mut xs = Vec::new();
    for rec in rd.records() {
        xs.push(rec?[col].parse::<f64>()?);
    }
    Ok(teleop_core::metrics::ErrorStats::from_samples(&xs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        c.bench.methods = vec![Method::Pd];
        c.bench.seeds = vec![0, 1];
        c.bench.eval_seconds = 0.4;
        c
    }

    #[test]
    fn pd_bench_needs_no_checkpoints_and_is_reproducible() {
        let c = small();
        let a = run_benchmark(&c, &Models::default(), vec![]).unwrap();
        let b = run_benchmark(&c, &Models::default(), vec![]).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.report.cells.len(), 3);
        for cell in &a.report.cells {
            assert!(cell.p95 <= cell.max && cell.mean <= cell.max && cell.mean >= 0.0);
            assert_eq!(cell.steps_per_episode, 100);
        }
    }

    #[test]
    fn missing_model_is_reported() {
        let mut c = small();
        c.bench.methods = vec![Method::Pmdc];
        let e = run_benchmark(&c, &Models::default(), vec![]).err().unwrap().to_string();
        assert!(e.contains("sbsp"), "{e}");
    }

    #[test]
    fn outputs_round_trip_and_match_traces() {
        let c = small();
        let out = run_benchmark(&c, &Models::default(), vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_outputs(dir.path(), &out).unwrap();
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: BenchmarkReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out.report);
        for cell in &back.cells {
            let mut means = Vec::new();
            let mut pooled = Vec::new();
            for s in &cell.seeds {
                let path = dir.path().join("traces").join(format!("pd_{}_{s}.csv", cell.preset));
                let stats = metrics_from_trace(&path).unwrap();
                assert_eq!(stats.count, cell.steps_per_episode);
                means.push(stats.mean);
                let mut rd = csv::Reader::from_path(&path).unwrap();
                pooled.extend(rd.records().map(|r| r.unwrap()[2].parse::<f64>().unwrap()));
            }
            let mean = means.iter().sum::<f64>() / means.len() as f64;
            assert!((mean - cell.mean).abs() < 1e-9);
            let max = pooled.iter().cloned().fold(0.0, f64::max);
            assert!((max - cell.max).abs() < 1e-9);
        }
        // table cells parse back to the JSON values at printed precision
        let txt = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        for cell in &back.cells {
            let line = txt.lines().find(|l| l.starts_with("pd ") && l.split_whitespace().nth(1) == Some(cell.preset.as_str())).unwrap();
            let vals: Vec<f64> = line.split_whitespace().skip(2).map(|v| v.parse().unwrap()).collect();
            for (v, want) in vals.iter().zip([cell.mean, cell.p95, cell.max, cell.std, cell.estimation_mean]) {
                assert!((v - want).abs() <= 5e-7, "{v} vs {want}");
            }
        }
        for p in &back.presets {
            let rows = csv::Reader::from_path(dir.path().join(format!("delays_{p}.csv"))).unwrap().records().count();
            assert_eq!(rows, 101);
        }
    }
}
