//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use teleop_core::env::Method;

use crate::bench;
use crate::config::{Config, Preset, PRESET_CHOICES};
use crate::io;
use crate::live::{self, ServeOptions};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "teleop", version, about = "Delay-robust teleoperation: training, benchmark and live server")]
pub struct Cli {
    /// TOML config; omitted sections use the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every training stage; benchmark seeds become N..N+k.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (checkpoints are read from and written to it).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Delay regime, or `paper` for the published training scale.
    #[arg(long, global = true, value_parser = parse_preset, value_name = "PRESET")]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).map_err(|_| format!("expected one of: {}", PRESET_CHOICES.join(", ")))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| "expected one of: dr_rl, pmdc, pd".to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate leader episodes through the delay channel and write them as CSV.
    GenData,
    /// Train the LSTM estimator and the state-buffer baseline model.
    TrainEstimator,
    /// Train the residual SAC policy on top of the frozen estimator.
    TrainPolicy,
    /// Closed-loop estimator error vs zero-order hold, per preset.
    EvalEstimator {
        #[arg(long, default_value_t = 20.0)]
        seconds: f64,
    },
    /// Run the method × preset × seed benchmark.
    Bench(BenchArgs),
    /// Live operator server.
    Serve(ServeArgs),
    /// Write the sampled delay trace of each preset.
    DumpDelays {
        /// Trace length (default: the bench evaluation window).
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Print the effective config (after --config, --seed, --preset) as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated subset of dr_rl, pmdc, pd.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Explicit comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Evaluation window per episode (s).
    #[arg(long)]
    pub seconds: Option<f64>,
    /// Parallel episode workers (results do not depend on this).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Checkpoint directory (defaults to --out).
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, value_name = "HOST:PORT")]
    pub bind: Option<String>,
    /// Controller driving the follower: dr_rl, pmdc or pd.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Send a state snapshot every N control ticks.
    #[arg(long, value_name = "N")]
    pub snapshot_div: Option<usize>,
    /// Serve static operator-console assets from this directory.
    #[arg(long, value_name = "DIR")]
    pub serve_ui: Option<PathBuf>,
    /// Stop after this many seconds (default: run until Ctrl-C).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Checkpoint directory (defaults to --out).
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    base.with_overrides(cli.seed, cli.preset.as_ref())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    io::write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::GenData => {
            let n = pipeline::gen_data(&cfg, &out)?;
            println!("wrote {n} episodes to {}", out.join("data").display());
        }
        Command::TrainEstimator => {
            io::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
            pipeline::train_estimator_stage(&cfg, &out)?;
            println!("wrote {} and {}", out.join(io::ESTIMATOR_FILE).display(), out.join(io::SBSP_FILE).display());
        }
        Command::TrainPolicy => {
            pipeline::train_policy_stage(&cfg, &out)?;
            println!("wrote {}", out.join(io::POLICY_FILE).display());
        }
        Command::EvalEstimator { seconds } => {
            let net = std::sync::Arc::new(io::load_estimator(&out)?);
            let r = pipeline::eval_estimator(&cfg, &net, seconds)?;
            write_json(&out.join("estimator_eval.json"), &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Bench(a) => {
            if let Some(m) = a.methods {
                cfg.bench.methods = m;
            }
            if let Some(s) = a.seeds {
                cfg.bench.seeds = s;
            }
            if let Some(s) = a.seconds {
                cfg.bench.eval_seconds = s;
            }
            if let Some(w) = a.workers {
                cfg.bench.workers = w;
            }
            cfg.validate()?;
            let models_dir = a.models.unwrap_or_else(|| out.clone());
            let models = io::load_models(&models_dir, &cfg.bench.methods)?;
            let digests = io::checkpoint_digests(&models_dir, &cfg.bench.methods)?;
            let result = bench::run_benchmark(&cfg, &models, digests)?;
            bench::emit_outputs(&out, &result)?;
            print!("{}", bench::format_table(&result.report));
        }
        Command::Serve(a) => {
            if let Some(b) = a.bind {
                cfg.serve.bind = b;
            }
            if let Some(m) = a.method {
                cfg.serve.method = m;
            }
            if let Some(d) = a.snapshot_div {
                cfg.serve.snapshot_div = d;
            }
            cfg.validate()?;
            let models_dir = a.models.unwrap_or_else(|| out.clone());
            let models = io::load_available(&models_dir)?;
            let opts = ServeOptions {
                serve: cfg.serve.clone(),
                seed: cli.seed.unwrap_or(0),
                duration: a.duration.map(Duration::from_secs_f64),
                ui_dir: a.serve_ui,
                inject_sleep: None,
            };
            let rt = tokio::runtime::Runtime::new()?;
            let timing = rt.block_on(live::serve(&cfg.env, models, opts))?;
            write_json(&out.join("serve_timing.json"), &timing)?;
            println!("ticks {} overruns {} p99 {:.3} ms", timing.ticks, timing.overruns, timing.p99_ms);
        }
        Command::DumpDelays { seconds } => {
            let secs = seconds.unwrap_or(cfg.bench.eval_seconds);
            for p in &cfg.bench.presets {
                let path = out.join(format!("delays_{p}.csv"));
                bench::write_delays(&path, p, cfg.bench.seeds[0], secs)?;
                println!("wrote {}", path.display());
            }
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}
