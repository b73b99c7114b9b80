//! Whether to keep a session's KV resident across its tool phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    pub deadline_slack: f64,
    pub max_pin_horizon_s: f64,
    /// Upper bound on the pressure weight; `None` lets it diverge.
    pub pressure_clip: Option<f64>,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            deadline_slack: 2.0,
            max_pin_horizon_s: 60.0,
            pressure_clip: Some(100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinnedSession {
    pub session_id: SessionId,
    pub pinned_blocks: u64,
    pub pinned_at: SimTime,
    pub predicted_return: SimTime,
    /// `None` keeps the pin until the session returns or is reclaimed.
    pub retention_deadline: Option<SimTime>,
}

pub type PinnedRegistry = BTreeMap<SessionId, PinnedSession>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionDecision {
    pub pin: bool,
    pub benefit_s: f64,
    pub cost_s: f64,
    pub deadline: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionInput {
    pub context_tokens: u64,
    pub blocks: u64,
    pub total_blocks: u64,
    pub kv_usage_ratio: f64,
    pub ema_tool_s: f64,
    pub prefill_rate: f64,
    pub now: SimTime,
}

pub fn pressure_weight(usage: f64, clip: Option<f64>) -> f64 {
    let w = if usage >= 1.0 { f64::INFINITY } else { 1.0 / (1.0 - usage) };
    match clip {
        Some(c) => w.min(c),
        None => w,
    }
}

/// Pins when the recompute time avoided exceeds the memory-time cost of
/// holding the blocks, and the expected tool phase is within the horizon.
pub fn decide_retention(input: &RetentionInput, config: &RetentionConfig) -> RetentionDecision {
    let benefit = input.context_tokens as f64 / input.prefill_rate;
    let weight = pressure_weight(input.kv_usage_ratio, config.pressure_clip);
    let share = input.blocks as f64 / input.total_blocks as f64;
    let cost = if weight.is_infinite() {
        f64::INFINITY
    } else {
        share * input.ema_tool_s * weight
    };
    let pin = benefit > cost && input.ema_tool_s <= config.max_pin_horizon_s;
    let hold = (input.ema_tool_s * config.deadline_slack).min(config.max_pin_horizon_s);
    RetentionDecision {
        pin,
        benefit_s: benefit,
        cost_s: cost,
        deadline: pin.then(|| input.now + SimTime::from_secs_f64(hold)),
    }
}
