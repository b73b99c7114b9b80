//! Data-plane scheduling: MLFQ coordination, chunk planning, KV retention
//! and reclamation.

pub mod plan;
pub mod priority;
pub mod reclaim;
pub mod retention;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;

pub use plan::{mlfq_order, plan_tick, select_batch, try_fit, PlanContext, PlanOptions, TickPlan};
pub use priority::{charge_service, initial_level, promote_waiting, MlfqConfig, PriorityState};
pub use reclaim::{eviction_order, reclaim_for, Candidate, Eviction, EvictionKind, VictimOrder};
pub use retention::{
    decide_retention, pressure_weight, PinnedRegistry, PinnedSession, RetentionConfig, RetentionDecision,
    RetentionInput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub level_boundaries: Vec<u64>,
    pub level_quotas: Vec<u64>,
    pub promotion_wait_s: f64,
    /// Defaults to one less than the number of levels.
    pub max_promotions: Option<u32>,
    /// Defaults to twice the engine's decode slots.
    pub window_size: Option<usize>,
    /// Planner token budget; defaults to the engine budget.
    pub max_batched_tokens: Option<u64>,
    pub deadline_slack: f64,
    pub max_pin_horizon_s: f64,
    /// Upper bound on the retention pressure weight; absent lets it diverge.
    pub pressure_clip: Option<f64>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        let m = MlfqConfig::default();
        let r = RetentionConfig::default();
        Self {
            level_boundaries: m.boundaries,
            level_quotas: m.quotas,
            promotion_wait_s: m.promotion_wait.as_secs_f64(),
            max_promotions: None,
            window_size: None,
            max_batched_tokens: None,
            deadline_slack: r.deadline_slack,
            max_pin_horizon_s: r.max_pin_horizon_s,
            pressure_clip: r.pressure_clip,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("scheduler.level_boundaries", "must be strictly increasing"));
        }
        if self.level_quotas.len() != self.level_boundaries.len() {
            return Err(Error::config(
                "scheduler.level_quotas",
                "needs one quota per bounded level (the last level is unlimited)",
            ));
        }
        if !(self.promotion_wait_s > 0.0) {
            return Err(Error::config("scheduler.promotion_wait_s", "must be > 0"));
        }
        if self.window_size == Some(0) {
            return Err(Error::config("scheduler.window_size", "must be >= 1"));
        }
        if self.max_batched_tokens == Some(0) {
            return Err(Error::config("scheduler.max_batched_tokens", "must be >= 1"));
        }
        if !(self.deadline_slack > 0.0) {
            return Err(Error::config("scheduler.deadline_slack", "must be > 0"));
        }
        if !(self.max_pin_horizon_s >= 0.0) {
            return Err(Error::config("scheduler.max_pin_horizon_s", "must be >= 0"));
        }
        Ok(())
    }

    pub fn retention(&self) -> RetentionConfig {
        RetentionConfig {
            deadline_slack: self.deadline_slack,
            max_pin_horizon_s: self.max_pin_horizon_s,
            pressure_clip: self.pressure_clip,
        }
    }

    pub fn mlfq(&self) -> MlfqConfig {
        MlfqConfig {
            boundaries: self.level_boundaries.clone(),
            quotas: self.level_quotas.clone(),
            promotion_wait: SimTime::from_secs_f64(self.promotion_wait_s),
            max_promotions: self
                .max_promotions
                .unwrap_or(self.level_boundaries.len() as u32),
        }
    }
}
