//! Runs configured experiments end to end: trace, isolated replay, policy
//! run, metrics and log audits.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::audit::{audit_all, AuditOutcome, AuditSpec};
use crate::baselines::{Ablation, Policy, PolicyKind};
use crate::config::{substrate_hash, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    compute_goodput, compute_ideal_times, completion_records, eviction_series, summarize, ttft_per_round,
    CompletionRecord, GoodputSeries, Summary, TtftReport,
};
use crate::sim::{simulate, SimConfig, SimOutput};
use crate::workload::{generate_workload, load_trace, trace_hash, validate_trace, SessionId, SessionTrace};

/// A trace with everything derived from it that every policy shares.
#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub traces: Vec<SessionTrace>,
    pub trace_hash: String,
    pub total_blocks: u64,
    pub substrate_hash: String,
    pub ideals: BTreeMap<SessionId, f64>,
}

impl Workload {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let traces = match (&cfg.trace, cfg.regime_for_seed(seed)) {
            (Some(path), _) => load_trace(path)?,
            (None, Some(regime)) => generate_workload(&regime)?,
            (None, None) => return Err(Error::config("regime", "missing section (or give `trace`)")),
        };
        Self::from_traces(cfg, seed, traces)
    }

    pub fn from_traces(cfg: &ExperimentConfig, seed: u64, traces: Vec<SessionTrace>) -> Result<Self> {
        validate_trace(&traces, cfg.engine.context_limit).into_result()?;
        let hash = trace_hash(&traces);
        let total_blocks = cfg.engine.resolve_blocks(&traces);
        let ideals = compute_ideal_times(&traces, &cfg.engine.gpu(), cfg.engine.block_size)?;
        Ok(Self {
            seed,
            substrate_hash: substrate_hash(&hash, &cfg.engine, total_blocks),
            trace_hash: hash,
            traces,
            total_blocks,
            ideals,
        })
    }

    pub fn horizon(&self, cfg: &ExperimentConfig) -> f64 {
        cfg.horizon_s.unwrap_or_else(|| {
            self.traces
                .iter()
                .map(|t| t.arrival_time)
                .fold(0.0, f64::max)
                .max(cfg.goodput.window_s)
        })
    }
}

pub fn policy_for(cfg: &ExperimentConfig) -> Policy {
    Policy::new(cfg.policy.clone(), cfg.ablation, &cfg.scheduler, &cfg.engine.gpu())
}

pub fn sim_config(cfg: &ExperimentConfig, workload: &Workload) -> SimConfig {
    SimConfig {
        gpu: cfg.engine.gpu(),
        block_size: cfg.engine.block_size,
        total_blocks: workload.total_blocks,
        worker_slots: cfg.engine.worker_slots,
        policy: policy_for(cfg),
        controller: cfg.controller.clone(),
        pressure: cfg.pressure.clone(),
    }
}

/// Display label: policy name plus the disabled mechanisms of the full policy.
pub fn run_label(kind: &PolicyKind, ablation: &Ablation) -> String {
    match kind {
        PolicyKind::Mars if *ablation != Ablation::default() => format!("mars/{}", ablation.label()),
        k => k.name().to_string(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub policy: String,
    pub experiment: String,
    pub arrival_rate: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub substrate_hash: String,
    pub trace_hash: String,
    pub sessions: usize,
    pub total_blocks: u64,
    pub makespan_s: f64,
    pub latency: Summary,
    pub goodput: GoodputSeries,
    pub eviction_front_share: f64,
    pub stats: crate::sim::SimStats,
    pub audits_passed: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub output: SimOutput,
    pub records: Vec<CompletionRecord>,
    pub ttft: TtftReport,
    pub eviction: Vec<u64>,
    pub audits: Vec<AuditOutcome>,
}

impl RunResult {
    pub fn audits_passed(&self) -> bool {
        self.audits.iter().all(|a| a.passed)
    }

    pub fn first_failure(&self) -> Option<&AuditOutcome> {
        self.audits.iter().find(|a| !a.passed)
    }
}

pub fn audit_spec(cfg: &ExperimentConfig, workload: &Workload) -> AuditSpec {
    AuditSpec {
        total_blocks: workload.total_blocks,
        budget: cfg.engine.token_budget_per_tick,
        ttl_seconds: match cfg.policy {
            PolicyKind::StaticTtl { ttl_seconds } => Some(ttl_seconds),
            _ => None,
        },
        arrival_order: matches!(
            cfg.policy,
            PolicyKind::Fcfs | PolicyKind::StaticTtl { .. } | PolicyKind::DynamicTtl { .. }
        ),
    }
}

/// Runs the configured policy on a prepared workload.
pub fn run_policy(cfg: &ExperimentConfig, workload: &Workload) -> Result<RunResult> {
    let sim_cfg = sim_config(cfg, workload);
    let output = simulate(&workload.traces, &sim_cfg)?;
    let ttft = ttft_per_round(&output.log)?;
    let records = completion_records(
        &output.sessions,
        &ttft.per_session,
        &workload.ideals,
        cfg.goodput.slo_slack_alpha,
    )?;
    let latencies: Vec<f64> = records.iter().map(|r| r.latency).collect();
    let latency = summarize(&latencies)?;
    let goodput = compute_goodput(&records, &cfg.goodput, workload.horizon(cfg))?;
    let eviction = eviction_series(&output.log, cfg.eviction_bins)?;
    let audits = audit_all(
        &output.log,
        &output.sessions,
        &workload.traces,
        &audit_spec(cfg, workload),
    );
    let summary = RunSummary {
        label: run_label(&cfg.policy, &cfg.ablation),
        policy: output.policy.clone(),
        experiment: cfg.name.clone(),
        arrival_rate: cfg.regime.as_ref().map(|r| r.arrival_rate),
        seed: workload.seed,
        config_hash: cfg.config_hash(),
        substrate_hash: workload.substrate_hash.clone(),
        trace_hash: workload.trace_hash.clone(),
        sessions: workload.traces.len(),
        total_blocks: workload.total_blocks,
        makespan_s: output.makespan_s,
        latency,
        goodput,
        eviction_front_share: crate::metrics::front_share(&eviction, 0.3),
        stats: output.stats,
        audits_passed: audits.iter().all(|a| a.passed),
    };
    Ok(RunResult {
        summary,
        output,
        records,
        ttft,
        eviction,
        audits,
    })
}

/// One run per configured seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.run_seeds()
        .into_iter()
        .map(|seed| run_policy(cfg, &Workload::prepare(cfg, seed)?))
        .collect()
}

/// Directory of one run below an output root.
pub fn run_dir(root: &std::path::Path, s: &RunSummary) -> std::path::PathBuf {
    let mut d = root.join(&s.experiment);
    if let Some(r) = s.arrival_rate {
        d.push(format!("rate-{r}"));
    }
    d.push(s.label.replace('/', "+"));
    d.push(format!("seed-{}", s.seed));
    d
}
