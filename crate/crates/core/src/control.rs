//! Admission control: pressure-aware queue packing and an AIMD window
//! clamped by CPU and KV soft limits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info_stream::{Signal, Telemetry};
use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub initial_window: f64,
    pub w_min: f64,
    pub aimd_increase: f64,
    pub aimd_decrease: f64,
    pub control_interval_s: f64,
    pub cpu_oversubscription: f64,
    pub kv_reserve_fraction: f64,
    pub long_session_fraction: f64,
    /// KV usage below which the window may grow.
    pub kv_slack_below: f64,
    pub block_ema_smoothing: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            initial_window: 16.0,
            w_min: 2.0,
            aimd_increase: 1.0,
            aimd_decrease: 0.5,
            control_interval_s: 2.0,
            cpu_oversubscription: 1.5,
            kv_reserve_fraction: 0.1,
            long_session_fraction: 0.25,
            kv_slack_below: 0.70,
            block_ema_smoothing: 0.3,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min >= 1.0) {
            return Err(Error::config("controller.w_min", "must be >= 1"));
        }
        if !(self.initial_window >= self.w_min) {
            return Err(Error::config("controller.initial_window", "must be >= w_min"));
        }
        if !(self.aimd_increase > 0.0) {
            return Err(Error::config("controller.aimd_increase", "must be > 0"));
        }
        if !(self.aimd_decrease > 0.0 && self.aimd_decrease < 1.0) {
            return Err(Error::config("controller.aimd_decrease", "must be in (0, 1)"));
        }
        if !(self.control_interval_s > 0.0) {
            return Err(Error::config("controller.control_interval_s", "must be > 0"));
        }
        if !(self.cpu_oversubscription > 0.0) {
            return Err(Error::config("controller.cpu_oversubscription", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.kv_reserve_fraction) {
            return Err(Error::config("controller.kv_reserve_fraction", "must be in [0, 1)"));
        }
        if !(self.long_session_fraction > 0.0) {
            return Err(Error::config("controller.long_session_fraction", "must be > 0"));
        }
        if !(self.block_ema_smoothing > 0.0 && self.block_ema_smoothing <= 1.0) {
            return Err(Error::config("controller.block_ema_smoothing", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerState {
    pub w_adm: f64,
    pub w_min: f64,
    pub aimd_increase: f64,
    pub aimd_decrease: f64,
    pub control_interval: SimTime,
    pub last_update: SimTime,
    /// Blocks per session, averaged over completed rounds.
    pub ema_blocks: Option<f64>,
}

impl ControllerState {
    pub fn new(config: &ControllerConfig) -> Self {
        Self {
            w_adm: config.initial_window,
            w_min: config.w_min,
            aimd_increase: config.aimd_increase,
            aimd_decrease: config.aimd_decrease,
            control_interval: SimTime::from_secs_f64(config.control_interval_s),
            last_update: SimTime::ZERO,
            ema_blocks: None,
        }
    }

    pub fn observe_round_blocks(&mut self, blocks: u64, smoothing: f64) {
        let x = blocks as f64;
        self.ema_blocks = Some(match self.ema_blocks {
            Some(cur) => smoothing * x + (1.0 - smoothing) * cur,
            None => x,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueueEntry {
    pub session_id: SessionId,
    pub req_blocks: u64,
    pub is_long_session: bool,
    pub enqueue_time: SimTime,
}

impl QueueEntry {
    pub fn new(session_id: SessionId, prefill_len: u64, block_size: u64, total_blocks: u64, long_fraction: f64, now: SimTime) -> Self {
        let req_blocks = estimate_blocks(prefill_len.max(1), block_size);
        Self {
            session_id,
            req_blocks,
            is_long_session: req_blocks as f64 > long_fraction * total_blocks as f64,
            enqueue_time: now,
        }
    }
}

pub fn estimate_blocks(prefill_len: u64, block_size: u64) -> u64 {
    prefill_len.div_ceil(block_size)
}

/// Reorders the admission queue for the current pressure state. All sorts
/// are stable, so equal keys keep their enqueue order.
pub fn pack_queue(queue: &mut Vec<QueueEntry>, telemetry: &Telemetry) {
    if telemetry.cpu_overloaded {
        queue.sort_by_key(|e| std::cmp::Reverse(e.req_blocks));
    } else if !queue.is_empty() && queue.iter().all(|e| e.is_long_session) {
        let mut room = telemetry.available_kv;
        let (mut placed, mut deferred) = (Vec::new(), Vec::new());
        for e in queue.drain(..) {
            if e.req_blocks <= room {
                room -= e.req_blocks;
                placed.push(e);
            } else {
                deferred.push(e);
            }
        }
        placed.extend(deferred);
        *queue = placed;
    } else {
        queue.sort_by_key(|e| e.req_blocks);
    }
}

pub fn calc_cpu_limit(telemetry: &Telemetry, config: &ControllerConfig) -> f64 {
    let raw = (telemetry.worker_slots as f64 * config.cpu_oversubscription).floor() - telemetry.queued_tools as f64;
    raw.max(config.w_min)
}

pub fn calc_kv_limit(telemetry: &Telemetry, ema_blocks: Option<f64>, config: &ControllerConfig) -> f64 {
    let per_session = ema_blocks.unwrap_or(1.0).max(1.0);
    let headroom = telemetry.available_kv as f64 * (1.0 - config.kv_reserve_fraction);
    ((headroom / per_session).floor() + telemetry.active_sessions as f64).max(config.w_min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowDecision {
    pub limit: usize,
    pub cpu_limit: f64,
    pub kv_limit: f64,
}

/// One AIMD step when a full control interval has elapsed, then the triple
/// clamp.
pub fn update_window(state: &mut ControllerState, telemetry: &Telemetry, now: SimTime, config: &ControllerConfig) -> WindowDecision {
    if now.saturating_sub(state.last_update) >= state.control_interval {
        if telemetry.cpu_overloaded || telemetry.kv_overloaded {
            state.w_adm = (state.w_adm * state.aimd_decrease).max(state.w_min);
        } else if telemetry.kv_usage_ratio < config.kv_slack_below {
            state.w_adm += state.aimd_increase;
        }
        state.last_update = now;
    }
    let cpu_limit = calc_cpu_limit(telemetry, config);
    let kv_limit = calc_kv_limit(telemetry, state.ema_blocks, config);
    let limit = state.w_adm.min(cpu_limit).min(kv_limit).floor().max(0.0) as usize;
    WindowDecision {
        limit,
        cpu_limit,
        kv_limit,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub admitted: Vec<QueueEntry>,
    pub decision: WindowDecision,
    pub signal: Signal,
}

fn median_blocks(queue: &[QueueEntry]) -> Option<f64> {
    let mut v: Vec<u64> = queue.iter().map(|e| e.req_blocks).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2] as f64)
}

/// Packs the queue, refreshes the window, and admits the front of the
/// packed queue up to the free session slots.
pub fn balance_and_admit(
    queue: &mut Vec<QueueEntry>,
    state: &mut ControllerState,
    telemetry: &Telemetry,
    now: SimTime,
    config: &ControllerConfig,
) -> Admission {
    if state.ema_blocks.is_none() {
        state.ema_blocks = median_blocks(queue);
    }
    pack_queue(queue, telemetry);
    let decision = update_window(state, telemetry, now, config);
    let slots = decision.limit.saturating_sub(telemetry.active_sessions);
    let n = slots.min(queue.len());
    let admitted: Vec<QueueEntry> = queue.drain(..n).collect();
    let signal = Signal::WindowUpdate {
        w_adm: state.w_adm,
        limit: decision.limit,
        cpu_limit: decision.cpu_limit,
        kv_limit: decision.kv_limit,
        active_sessions: telemetry.active_sessions,
        admitted: admitted.len(),
        cpu_overloaded: telemetry.cpu_overloaded,
        kv_overloaded: telemetry.kv_overloaded,
    };
    Admission {
        admitted,
        decision,
        signal,
    }
}
