//! Latency, goodput, TTFT and eviction metrics computed from run outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::Policy;
use crate::control::ControllerConfig;
use crate::engine::GpuModel;
use crate::error::{Error, Result};
use crate::info_stream::{PressureConfig, Signal};
use crate::log::{EngineOp, FreeReason, LogRecord};
use crate::sim::{simulate, SessionOutcome, SimConfig};
use crate::workload::{SessionId, SessionTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoodputConfig {
    pub slo_slack_alpha: f64,
    pub window_s: f64,
}

impl Default for GoodputConfig {
    fn default() -> Self {
        Self {
            slo_slack_alpha: 3.0,
            window_s: 60.0,
        }
    }
}

impl GoodputConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slo_slack_alpha >= 1.0) {
            return Err(Error::config("goodput.slo_slack_alpha", "must be >= 1"));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(Error::config("goodput.window_s", "must be a positive number of seconds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub session_id: SessionId,
    pub arrival_time: f64,
    pub completion_time: f64,
    pub latency: f64,
    pub ttft: Vec<f64>,
    pub ideal_time: Option<f64>,
    pub tau: Option<f64>,
}

/// Concurrency-one replay of every session on a private engine with an
/// always-warm KV pool and no queueing.
pub fn compute_ideal_times(traces: &[SessionTrace], gpu: &GpuModel, block_size: u64) -> Result<BTreeMap<SessionId, f64>> {
    traces
        .iter()
        .map(|t| Ok((t.session_id, ideal_time(t, gpu, block_size)?)))
        .collect()
}

pub fn ideal_time(trace: &SessionTrace, gpu: &GpuModel, block_size: u64) -> Result<f64> {
    let mut alone = trace.clone();
    alone.arrival_time = 0.0;
    let cfg = SimConfig {
        gpu: gpu.clone(),
        block_size,
        total_blocks: alone.peak_blocks(block_size) + 1,
        worker_slots: 1,
        policy: Policy::isolation(gpu),
        controller: ControllerConfig::default(),
        pressure: PressureConfig::default(),
    };
    let out = simulate(std::slice::from_ref(&alone), &cfg)?;
    Ok(out.sessions[0].completion_s)
}

/// Joins outcomes with per-round TTFTs and ideal times. Fails when a session
/// finishes faster than its isolated replay.
pub fn completion_records(
    outcomes: &[SessionOutcome],
    ttft: &BTreeMap<SessionId, Vec<f64>>,
    ideals: &BTreeMap<SessionId, f64>,
    alpha: f64,
) -> Result<Vec<CompletionRecord>> {
    outcomes
        .iter()
        .map(|o| {
            let latency = o.completion_s - o.arrival_s;
            let ideal = ideals.get(&o.session_id).copied();
            if let Some(t) = ideal {
                if latency + 1e-6 < t {
                    return Err(Error::Integrity {
                        session: o.session_id,
                        detail: format!("latency {latency} s below isolated time {t} s"),
                    });
                }
            }
            Ok(CompletionRecord {
                session_id: o.session_id,
                arrival_time: o.arrival_s,
                completion_time: o.completion_s,
                latency,
                ttft: ttft.get(&o.session_id).cloned().unwrap_or_default(),
                ideal_time: ideal,
                tau: ideal.map(|t| alpha * t),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodputSeries {
    pub window_s: f64,
    pub horizon_s: f64,
    /// SLO-satisfying completions per window.
    pub counts: Vec<u64>,
    /// `counts / window_s`.
    pub rates: Vec<f64>,
    pub satisfied: u64,
    /// Satisfying completions over the whole horizon, per second.
    pub aggregate: f64,
}

/// Tumbling window index `k` with `k·Δt <= t < (k+1)·Δt`, evaluated with
/// the same products an explicit scan would use.
fn window_of(t: f64, dt: f64) -> usize {
    let mut k = (t / dt).floor().max(0.0) as usize;
    while k > 0 && k as f64 * dt > t {
        k -= 1;
    }
    while (k + 1) as f64 * dt <= t {
        k += 1;
    }
    k
}

/// Windows tile `[0, horizon]` from zero; a completion exactly at the
/// horizon falls in the last window, later ones are outside.
pub fn compute_goodput(records: &[CompletionRecord], config: &GoodputConfig, horizon_s: f64) -> Result<GoodputSeries> {
    config.validate()?;
    let dt = config.window_s;
    let n = ((horizon_s / dt).ceil() as usize).max(1);
    let mut counts = vec![0u64; n];
    for r in records {
        let ideal = r.ideal_time.ok_or_else(|| {
            Error::contract(format!("completion record for session {} lacks an ideal time", r.session_id))
        })?;
        let c = r.completion_time;
        if c < 0.0 || c > horizon_s || r.latency > config.slo_slack_alpha * ideal {
            continue;
        }
        counts[window_of(c, dt).min(n - 1)] += 1;
    }
    let satisfied = counts.iter().sum();
    Ok(GoodputSeries {
        window_s: dt,
        horizon_s,
        rates: counts.iter().map(|&c| c as f64 / dt).collect(),
        counts,
        satisfied,
        aggregate: if horizon_s > 0.0 { satisfied as f64 / horizon_s } else { 0.0 },
    })
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::contract(format!("percentile rank {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    Ok(Summary {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
        p50: percentile(values, 50.0)?,
        p90: percentile(values, 90.0)?,
        p95: percentile(values, 95.0)?,
        p99: percentile(values, 99.0)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTtft {
    pub round: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TtftReport {
    pub per_session: BTreeMap<SessionId, Vec<f64>>,
    pub per_round: Vec<RoundTtft>,
}

/// TTFT of each round: first token of the round minus its first submission.
pub fn ttft_per_round(log: &[LogRecord]) -> Result<TtftReport> {
    let mut submit: BTreeMap<(SessionId, usize), f64> = BTreeMap::new();
    let mut first: BTreeMap<(SessionId, usize), f64> = BTreeMap::new();
    for r in log {
        let (Some(sid), Some(sig)) = (r.session_id, r.signal()) else { continue };
        match sig {
            Signal::GpuSubmit { round, .. } => {
                submit.entry((sid, *round)).or_insert(r.t);
            }
            Signal::GpuFirstToken { round, .. } => {
                if !submit.contains_key(&(sid, *round)) {
                    return Err(Error::Integrity {
                        session: sid,
                        detail: format!("first token of round {round} without a submission"),
                    });
                }
                first.entry((sid, *round)).or_insert(r.t);
            }
            _ => {}
        }
    }
    let mut report = TtftReport::default();
    let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&(sid, round), &t0) in &submit {
        let t1 = *first.get(&(sid, round)).ok_or_else(|| Error::Integrity {
            session: sid,
            detail: format!("round {round} submitted but never produced a token"),
        })?;
        report.per_session.entry(sid).or_default().push(t1 - t0);
        by_round.entry(round).or_default().push(t1 - t0);
    }
    for (round, v) in by_round {
        report.per_round.push(RoundTtft {
            round,
            summary: summarize(&v)?,
        });
    }
    Ok(report)
}

/// Blocks removed by anything other than session completion, bucketed by
/// normalized run progress.
pub fn eviction_series(log: &[LogRecord], bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(Error::contract("eviction series needs at least one bin"));
    }
    let mut out = vec![0u64; bins];
    let (Some(first), Some(last)) = (log.first(), log.last()) else {
        return Ok(out);
    };
    let (start, span) = (first.t, last.t - first.t);
    for r in log {
        if let Some(EngineOp::Free { blocks, reason }) = r.engine() {
            if *reason == FreeReason::Complete {
                continue;
            }
            let frac = if span > 0.0 { (r.t - start) / span } else { 0.0 };
            let bin = ((frac * bins as f64).floor() as usize).min(bins - 1);
            out[bin] += blocks;
        }
    }
    Ok(out)
}

/// Fraction of the series mass in the first `fraction` of the bins.
pub fn front_share(series: &[u64], fraction: f64) -> f64 {
    let total: u64 = series.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let k = (series.len() as f64 * fraction).round() as usize;
    series[..k.min(series.len())].iter().sum::<u64>() as f64 / total as f64
}
