//! Experiment configuration (a single JSON document).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reentrant_core::ctmc::DEFAULT_STATE_BUDGET;
use reentrant_core::{BaseParams, DistributionSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "one")]
    pub alpha1: f64,
    pub m: [f64; 5],
    #[serde(default)]
    pub arrival: DistributionSpec,
    #[serde(default = "exponential_services")]
    pub services: [DistributionSpec; 5],
}

fn one() -> f64 {
    1.0
}

fn exponential_services() -> [DistributionSpec; 5] {
    [DistributionSpec::Exponential; 5]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Strictly decreasing heavy-traffic indices.
    pub r: Vec<f64>,
    /// Events per replication, warmup included.
    pub horizon: f64,
    /// Warmup events; 10% of the horizon when absent.
    #[serde(default)]
    pub warmup: Option<f64>,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "one_usize")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batches() -> usize {
    32
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "yes")]
    pub ssc: bool,
    #[serde(default = "yes")]
    pub fit: bool,
    /// Snapshot spacing is `fit_spacing / r^2` time units.
    #[serde(default = "default_spacing")]
    pub fit_spacing: f64,
    #[serde(default = "default_min_samples")]
    pub fit_min_samples: usize,
    /// Largest allowed `|r E[Z1]/d1 - 1|` and `|r^2 E[Z4]/d4 - 1|` at the smallest `r`.
    #[serde(default = "default_rel_err")]
    pub max_rel_err: f64,
    /// Largest allowed `r E[Z_k]` for `k = 2, 3, 5` at the smallest `r`.
    #[serde(default = "default_ssc")]
    pub max_high_priority: f64,
    #[serde(default = "default_ks1")]
    pub max_ks1: f64,
    #[serde(default = "default_ks4")]
    pub max_ks4: f64,
    #[serde(default = "default_corr")]
    pub max_corr: f64,
    #[serde(default)]
    pub bar_check: bool,
    #[serde(default)]
    pub lyapunov: bool,
    /// Starting caps of the truncated chain.
    #[serde(default = "default_caps")]
    pub ctmc_caps: [u32; 5],
    #[serde(default = "default_budget")]
    pub state_budget: usize,
    /// Minimum occupation time before a conditional MGF is reported.
    #[serde(default = "default_floor")]
    pub min_conditioning_time: f64,
}

fn default_spacing() -> f64 {
    100.0
}
fn default_min_samples() -> usize {
    10_000
}
fn default_rel_err() -> f64 {
    0.2
}
fn default_ssc() -> f64 {
    0.1
}
fn default_ks1() -> f64 {
    0.08
}
fn default_ks4() -> f64 {
    0.05
}
fn default_corr() -> f64 {
    0.1
}
fn default_caps() -> [u32; 5] {
    [25, 10, 10, 40, 10]
}
fn default_budget() -> usize {
    DEFAULT_STATE_BUDGET
}
fn default_floor() -> f64 {
    50.0
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all analysis fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("results")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    #[serde(default = "yes")]
    pub heavy_traffic: bool,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            anyhow::anyhow!("{origin}:{}:{}: {e}", e.line(), e.column())
        })?;
        cfg.validate().with_context(|| format!("{origin}: invalid configuration"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn base(&self) -> BaseParams {
        BaseParams {
            alpha1: self.network.alpha1,
            m: self.network.m,
            dist_e: self.network.arrival,
            dist_s: self.network.services,
            heavy_traffic: self.heavy_traffic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.sweep {
            if s.r.is_empty() {
                bail!("sweep.r: at least one index required");
            }
            if let Some(r) = s.r.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
                bail!("sweep.r: {r} outside (0, 1)");
            }
            if s.r.windows(2).any(|w| w[1] >= w[0]) {
                bail!("sweep.r: must be strictly decreasing");
            }
            if s.replications < 1 {
                bail!("sweep.replications: must be >= 1");
            }
            let warmup = s.warmup.unwrap_or(s.horizon / 10.0);
            if !(s.horizon > warmup && warmup >= 0.0) {
                bail!("sweep.horizon: must exceed sweep.warmup");
            }
        }
        if !(self.analysis.fit_spacing > 0.0) {
            bail!("analysis.fit_spacing: must be positive");
        }
        Ok(())
    }
}
