//! Experiment configuration files (TOML).
//!
//! ```toml
//! seeds = [1, 2]
//! output_dir = "out"
//!
//! [regime]
//! mean_prompt_volume = 12000.0
//! prompt_volume_range = [1000, 64000]
//! rounds_range = [2, 6]
//! arrival_rate = 1.0
//! request_count = 200
//! seed = 1
//!
//! [engine]
//! kv_demand_fraction = 0.3
//! worker_slots = 128
//!
//! [policy]
//! kind = "mars"
//! ```
//!
//! `trace = "path.jsonl"` may replace `[regime]`. Every other section is
//! optional and falls back to its defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{Ablation, PolicyKind};
use crate::control::ControllerConfig;
use crate::engine::GpuModel;
use crate::error::{Error, Result};
use crate::info_stream::PressureConfig;
use crate::metrics::GoodputConfig;
use crate::scheduler::SchedulerConfig;
use crate::sim::SimConfig;
use crate::workload::{RegimeConfig, SessionTrace};

fn d_budget() -> u64 {
    512
}
fn d_rate() -> f64 {
    8000.0
}
fn d_block() -> u64 {
    16
}
fn d_slots() -> usize {
    16
}
fn d_context() -> u64 {
    262_144
}
fn d_decode_slots() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "d_budget")]
    pub token_budget_per_tick: u64,
    /// Prefill tokens per second; sets the tick length.
    #[serde(default = "d_rate")]
    pub prefill_rate: f64,
    #[serde(default = "d_block")]
    pub block_size: u64,
    /// Absolute pool size. Exclusive with `kv_demand_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_blocks: Option<u64>,
    /// Pool size as a fraction of the summed per-session peak footprints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_demand_fraction: Option<f64>,
    #[serde(default = "d_slots")]
    pub worker_slots: usize,
    #[serde(default = "d_context")]
    pub context_limit: u64,
    #[serde(default = "d_decode_slots")]
    pub max_decode_slots: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            token_budget_per_tick: d_budget(),
            prefill_rate: d_rate(),
            block_size: d_block(),
            total_blocks: None,
            kv_demand_fraction: None,
            worker_slots: d_slots(),
            context_limit: d_context(),
            max_decode_slots: d_decode_slots(),
        }
    }
}

impl EngineConfig {
    pub fn gpu(&self) -> GpuModel {
        GpuModel::from_prefill_rate(
            self.token_budget_per_tick,
            self.prefill_rate,
            self.context_limit,
            self.max_decode_slots,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prefill_rate > 0.0 && self.prefill_rate.is_finite()) {
            return Err(Error::config("engine.prefill_rate", "must be positive and finite"));
        }
        if self.block_size == 0 {
            return Err(Error::config("engine.block_size", "must be >= 1"));
        }
        match (self.total_blocks, self.kv_demand_fraction) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "engine.total_blocks",
                    "set either total_blocks or kv_demand_fraction, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "engine.total_blocks",
                    "one of total_blocks or kv_demand_fraction is required",
                ))
            }
            (Some(0), _) => return Err(Error::config("engine.total_blocks", "must be >= 1")),
            (_, Some(f)) if !(f > 0.0 && f.is_finite()) => {
                return Err(Error::config("engine.kv_demand_fraction", "must be positive and finite"))
            }
            _ => {}
        }
        self.gpu().validate()
    }

    /// Pool size for a concrete trace. A fractional pool never drops below
    /// the largest single session.
    pub fn resolve_blocks(&self, traces: &[SessionTrace]) -> u64 {
        match (self.total_blocks, self.kv_demand_fraction) {
            (Some(b), _) => b,
            (None, Some(f)) => {
                let demand: u64 = traces.iter().map(|t| t.peak_blocks(self.block_size)).sum();
                ((demand as f64 * f).floor() as u64).max(SimConfig::min_blocks(traces, self.block_size))
            }
            (None, None) => unreachable!("validated engine config"),
        }
    }
}

fn d_name() -> String {
    "default".into()
}

fn d_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Regime label carried into reports.
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Goodput horizon; defaults to the last arrival of the trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    #[serde(default = "d_bins")]
    pub eviction_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeConfig>,
    pub engine: EngineConfig,
    pub policy: PolicyKind,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub pressure: PressureConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub goodput: GoodputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Grid of runs sharing one config: every policy at every arrival rate,
/// plus the full policy with each listed mechanism disabled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Empty keeps the regime's own rate.
    #[serde(default)]
    pub arrival_rates: Vec<f64>,
    /// Policy names with default parameters; empty means all five.
    #[serde(default)]
    pub policies: Vec<String>,
    #[serde(default)]
    pub ablations: Vec<String>,
}

const SECTIONS: [&str; 2] = ["engine", "policy"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        for s in SECTIONS {
            if !table.contains_key(s) {
                return Err(Error::config(s, "missing section"));
            }
        }
        if !table.contains_key("regime") && !table.contains_key("trace") {
            return Err(Error::config("regime", "missing section (or give `trace`)"));
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("seeds", format!("seed {s} listed twice")));
        }
        if let Some(r) = &self.regime {
            r.validate()?;
            if r.context_limit > self.engine.context_limit {
                return Err(Error::config("regime.context_limit", "exceeds engine.context_limit"));
            }
        }
        if let Some(h) = self.horizon_s {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config("horizon_s", "must be positive and finite"));
            }
        }
        if self.eviction_bins == 0 {
            return Err(Error::config("eviction_bins", "must be >= 1"));
        }
        if let Some(sw) = &self.sweep {
            if !sw.arrival_rates.is_empty() && self.regime.is_none() {
                return Err(Error::config("sweep.arrival_rates", "needs a [regime] section"));
            }
            if let Some(r) = sw.arrival_rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
                return Err(Error::config("sweep.arrival_rates", format!("{r} is not a positive rate")));
            }
            for p in &sw.policies {
                PolicyKind::from_name(p)?;
            }
            for a in &sw.ablations {
                Ablation::default().disable(a)?;
            }
        }
        self.engine.validate()?;
        self.policy.validate()?;
        self.controller.validate()?;
        self.pressure.validate()?;
        self.scheduler.validate()?;
        self.goodput.validate()
    }

    /// Seeds to run: the explicit list, else the regime's own seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            self.seeds.clone()
        } else {
            vec![self.regime.as_ref().map_or(0, |r| r.seed)]
        }
    }

    /// The regime with its seed replaced.
    pub fn regime_for_seed(&self, seed: u64) -> Option<RegimeConfig> {
        self.regime.clone().map(|mut r| {
            r.seed = seed;
            r
        })
    }

    /// Concrete single-policy configs of the sweep, or just `self`.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        let Some(sw) = &self.sweep else {
            return Ok(vec![self.clone()]);
        };
        let mut base = self.clone();
        base.sweep = None;
        let rated: Vec<ExperimentConfig> = if sw.arrival_rates.is_empty() {
            vec![base]
        } else {
            sw.arrival_rates
                .iter()
                .map(|&rate| {
                    let mut c = base.clone();
                    if let Some(r) = c.regime.as_mut() {
                        r.arrival_rate = rate;
                    }
                    c
                })
                .collect()
        };
        let policies = if sw.policies.is_empty() {
            PolicyKind::all_defaults()
        } else {
            sw.policies.iter().map(|p| PolicyKind::from_name(p)).collect::<Result<_>>()?
        };
        let mut out = Vec::new();
        for c in rated {
            for p in &policies {
                let mut run = c.clone();
                run.policy = p.clone();
                run.ablation = Ablation::default();
                out.push(run);
            }
            for a in &sw.ablations {
                let mut run = c.clone();
                run.policy = PolicyKind::Mars;
                run.ablation = Ablation::default();
                run.ablation.disable(a)?;
                out.push(run);
            }
        }
        Ok(out)
    }

    /// Hash of everything that shapes a run (output location excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.name.clear();
        sha256_json(&c)
    }
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Identity of the shared substrate: the trace plus the engine as resolved
/// for it. Runs are comparable only when these agree.
pub fn substrate_hash(trace_hash: &str, engine: &EngineConfig, total_blocks: u64) -> String {
    let mut e = engine.clone();
    e.total_blocks = Some(total_blocks);
    e.kv_demand_fraction = None;
    sha256_json(&(trace_hash, e))
}
