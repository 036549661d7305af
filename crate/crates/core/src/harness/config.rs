//! Experiment configuration files.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterInit;
use crate::config::OptimizerConfig;
use crate::error::{LoftError, Result};
use crate::problems::LossConvention;

/// The only config format version understood by this build.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerId {
    FullGdMomentum,
    FullAdamw,
    FullMuon,
    LoraAdamw,
    LoftGd,
    LoftGdMomentum,
    LoftAdamw,
    LoftMuon,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 8] = [
        OptimizerId::FullGdMomentum,
        OptimizerId::FullAdamw,
        OptimizerId::FullMuon,
        OptimizerId::LoraAdamw,
        OptimizerId::LoftGd,
        OptimizerId::LoftGdMomentum,
        OptimizerId::LoftAdamw,
        OptimizerId::LoftMuon,
    ];

    /// Whether the method trains the dense matrix directly.
    pub fn is_full(self) -> bool {
        matches!(self, OptimizerId::FullGdMomentum | OptimizerId::FullAdamw | OptimizerId::FullMuon)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerId::FullGdMomentum => "full_gd_momentum",
            OptimizerId::FullAdamw => "full_adamw",
            OptimizerId::FullMuon => "full_muon",
            OptimizerId::LoraAdamw => "lora_adamw",
            OptimizerId::LoftGd => "loft_gd",
            OptimizerId::LoftGdMomentum => "loft_gd_momentum",
            OptimizerId::LoftAdamw => "loft_adamw",
            OptimizerId::LoftMuon => "loft_muon",
        }
    }
}

/// Matrix-factorization target `A = G₁G₂ᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub m: usize,
    pub n: usize,
    pub target_rank: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConvention,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// `U = 0`, Gaussian `V`.
    #[default]
    Lora,
    /// Both factors Gaussian.
    Gaussian,
    /// Factors spanning the target's singular subspaces.
    Subspace,
}

/// Starting point. Full-parameter methods start from `W₀ + U₀V₀ᵀ` of the
/// same initialization, so paired runs share their first iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
}

impl InitSpec {
    pub(crate) fn adapter_init(self) -> Option<AdapterInit> {
        match self {
            InitSpec::Lora => Some(AdapterInit::Lora),
            InitSpec::Gaussian => Some(AdapterInit::Gaussian),
            InitSpec::Subspace => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `η_k = η (1 − k/T)` for steps `k = 0..T`.
    LinearDecay,
}

impl Schedule {
    pub fn eta_at(self, eta: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => eta,
            Schedule::LinearDecay => eta * (1.0 - step as f64 / total as f64),
        }
    }
}

fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub problem: ProblemSpec,
    pub adapter: AdapterSpec,
    pub optimizer: OptimizerId,
    #[serde(default)]
    pub hyper: OptimizerConfig,
    pub iterations: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Record wall-clock milliseconds. Off by default so outputs are a pure
    /// function of the config.
    #[serde(default)]
    pub timing: bool,
    /// Output directory; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub version: u32,
    pub name: String,
    pub experiments: Vec<ExperimentConfig>,
}

/// Either file shape; batches are recognized by their `experiments` key.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    Single(ExperimentConfig),
    Batch(BatchConfig),
}

fn check_version(v: u32, field: &str) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(LoftError::config(
            field,
            format!("unsupported version {v}, expected {CONFIG_VERSION}"),
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "version")?;
        let field = |f: &str| format!("{}.{f}", self.name);
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(LoftError::config("name", format!("`{}` must be a non-empty [A-Za-z0-9._-] string", self.name)));
        }
        let p = &self.problem;
        if p.m == 0 || p.n == 0 {
            return Err(LoftError::config(field("problem.m/n"), "dimensions must be positive"));
        }
        if p.target_rank == 0 || p.target_rank > p.m.min(p.n) {
            return Err(LoftError::config(
                field("problem.target_rank"),
                format!("must lie in 1..={}", p.m.min(p.n)),
            ));
        }
        let r = self.adapter.rank;
        if r == 0 {
            return Err(LoftError::config(field("adapter.rank"), "must be positive"));
        }
        if self.adapter.init == InitSpec::Subspace && r > p.target_rank {
            return Err(LoftError::config(
                field("adapter.rank"),
                "subspace initialization needs rank <= problem.target_rank",
            ));
        }
        if self.iterations == 0 {
            return Err(LoftError::config(field("iterations"), "must be positive"));
        }
        if self.log_every == 0 {
            return Err(LoftError::config(field("log_every"), "must be positive"));
        }
        self.hyper
            .validate()
            .map_err(|e| match e {
                LoftError::InvalidConfig { field: f, reason } => LoftError::config(field(&format!("hyper.{f}")), reason),
                other => other,
            })
    }

    /// Reseed for sweeps: the problem gets `seed`, the adapter `seed + 1`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.problem.seed = seed;
        self.adapter.seed = seed.wrapping_add(1);
        self
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let file = if value.get("experiments").is_some() {
            ConfigFile::Batch(serde_json::from_value(value)?)
        } else {
            ConfigFile::Single(serde_json::from_value(value)?)
        };
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConfigFile::Single(c) => c.validate(),
            ConfigFile::Batch(b) => {
                check_version(b.version, "version")?;
                if b.experiments.is_empty() {
                    return Err(LoftError::config("experiments", "batch must not be empty"));
                }
                let mut names = HashSet::new();
                for e in &b.experiments {
                    e.validate()?;
                    if !names.insert(e.name.as_str()) {
                        return Err(LoftError::config("experiments", format!("duplicate name `{}`", e.name)));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        match self {
            ConfigFile::Single(c) => vec![c.clone()],
            ConfigFile::Batch(b) => b.experiments.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let s = match self {
            ConfigFile::Single(c) => serde_json::to_string_pretty(c),
            ConfigFile::Batch(b) => serde_json::to_string_pretty(b),
        };
        s.expect("configs always serialize")
    }
}
