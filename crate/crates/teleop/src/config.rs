//! The single structured config file (TOML). Every section is optional and
//! falls back to the defaults; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use teleop_core::control::SbspTrainConfig;
use teleop_core::delay::{DelayConfig, PRESET_NAMES};
use teleop_core::env::{EnvConfig, Method};
use teleop_core::estimator::{EstimatorConfig, EstimatorTrainConfig};
use teleop_core::sac::SacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub presets: Vec<String>,
    pub seeds: Vec<u64>,
    pub eval_seconds: f64,
    /// Worker threads for benchmark cells; 0 uses every core.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            presets: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: (0..5).collect(),
            eval_seconds: teleop_core::eval::EVAL_SECONDS,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub method: Method,
    pub preset: String,
    /// Broadcast a snapshot every N control ticks.
    pub snapshot_div: usize,
    /// Wall-clock budget per tick (ms); longer ticks count as overruns.
    pub tick_budget_ms: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8765".into(), method: Method::DrRl, preset: "high_high".into(), snapshot_div: 4, tick_budget_ms: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvConfig,
    pub estimator: EstimatorTrainConfig,
    pub sbsp: SbspTrainConfig,
    pub sac: SacConfig,
    pub bench: BenchConfig,
    pub serve: ServeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            estimator: EstimatorTrainConfig::default(),
            sbsp: SbspTrainConfig::default(),
            sac: SacConfig::default(),
            bench: BenchConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Value of the global `--preset` flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One of the named delay regimes.
    Delay(String),
    /// Published training scale (large estimator, slow SAC learning rates).
    Paper,
}

pub const PRESET_CHOICES: [&str; 4] = ["low_low", "high_low", "high_high", "paper"];

impl Preset {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            s if PRESET_NAMES.contains(&s) => Ok(Preset::Delay(s.to_string())),
            _ => bail!("unknown preset `{s}`; expected one of {}", PRESET_CHOICES.join(", ")),
        }
    }
}

pub fn delay_preset(name: &str) -> anyhow::Result<DelayConfig> {
    DelayConfig::preset(name).with_context(|| format!("unknown delay preset `{name}`; expected one of {}", PRESET_NAMES.join(", ")))
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.env.validate()?;
        self.sac.validate()?;
        self.estimator.net.validate()?;
        for p in self.bench.presets.iter().chain(self.estimator.presets.iter()).chain(std::iter::once(&self.serve.preset)) {
            delay_preset(p)?;
        }
        if self.bench.seeds.is_empty() || self.bench.methods.is_empty() || self.bench.presets.is_empty() {
            bail!("bench needs at least one method, preset and seed");
        }
        if self.estimator.net.dof != self.env.dof() {
            bail!("estimator dof {} does not match the arm's {} joints", self.estimator.net.dof, self.env.dof());
        }
        if self.serve.snapshot_div == 0 {
            bail!("serve.snapshot_div must be at least 1");
        }
        Ok(())
    }

    /// Applies the global `--seed` and `--preset` flags.
    pub fn with_overrides(mut self, seed: Option<u64>, preset: Option<&Preset>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.estimator.seed = s;
            self.sbsp.seed = s;
            self.sac.seed = s;
            let k = self.bench.seeds.len() as u64;
            self.bench.seeds = (s..s + k).collect();
        }
        match preset {
            Some(Preset::Delay(name)) => {
                self.env.delay = delay_preset(name)?;
                self.bench.presets = vec![name.clone()];
                self.serve.preset = name.clone();
            }
            Some(Preset::Paper) => {
                self.estimator.net = EstimatorConfig::paper(self.env.dof());
                self.sac = SacConfig { seed: self.sac.seed, ..SacConfig::paper() };
            }
            None => {}
        }
        self.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
