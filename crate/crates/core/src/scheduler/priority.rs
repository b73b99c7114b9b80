//! Footprint-classed MLFQ levels with token quotas and bounded promotion.

use serde::Serialize;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlfqConfig {
    /// Upper context bound of each level except the last, which is unbounded.
    pub boundaries: Vec<u64>,
    /// Service quota of each level except the last, which is unlimited.
    pub quotas: Vec<u64>,
    pub promotion_wait: SimTime,
    pub max_promotions: u32,
}

impl Default for MlfqConfig {
    fn default() -> Self {
        Self {
            boundaries: vec![4_000, 32_000, 128_000],
            quotas: vec![2_048, 8_192, 32_768],
            promotion_wait: SimTime::from_secs_f64(10.0),
            max_promotions: 3,
        }
    }
}

impl MlfqConfig {
    pub fn num_levels(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bottom(&self) -> usize {
        self.boundaries.len()
    }

    pub fn quota(&self, level: usize) -> Option<u64> {
        self.quotas.get(level).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PriorityState {
    pub level: usize,
    pub base_level: usize,
    pub served_tokens_at_level: u64,
    pub wait_since: SimTime,
    pub promotions: u32,
}

impl PriorityState {
    pub fn new(context_tokens: u64, now: SimTime, config: &MlfqConfig) -> Self {
        let level = initial_level(context_tokens, config);
        Self {
            level,
            base_level: level,
            served_tokens_at_level: 0,
            wait_since: now,
            promotions: 0,
        }
    }
}

/// Index of the smallest class boundary that holds `context_tokens`.
pub fn initial_level(context_tokens: u64, config: &MlfqConfig) -> usize {
    config
        .boundaries
        .iter()
        .position(|&b| context_tokens <= b)
        .unwrap_or(config.bottom())
}

/// Charges GPU service; exceeding the level quota demotes one level and
/// resets the counter.
pub fn charge_service(state: &mut PriorityState, tokens: u64, config: &MlfqConfig) {
    state.served_tokens_at_level += tokens;
    if let Some(quota) = config.quota(state.level) {
        if state.served_tokens_at_level > quota && state.level < config.bottom() {
            state.level += 1;
            state.served_tokens_at_level = 0;
        }
    }
}

/// Promotes a waiting call one level per full `promotion_wait` elapsed since
/// `wait_since`, up to the level ceiling and the promotion budget.
pub fn promote_waiting(state: &mut PriorityState, now: SimTime, config: &MlfqConfig) {
    let wait = config.promotion_wait.as_micros();
    if wait == 0 || state.level == 0 || state.promotions >= config.max_promotions {
        return;
    }
    let windows = now.saturating_sub(state.wait_since).as_micros() / wait;
    let budget = (config.max_promotions - state.promotions) as u64;
    let k = windows.min(state.level as u64).min(budget);
    if k > 0 {
        state.level -= k as usize;
        state.promotions += k as u32;
        state.wait_since += SimTime(k * wait);
    }
}
