//! Policy selection. Every policy drives the same engine; they differ only in
//! service order, chunk placement, victim choice and KV retention.

use serde::{Deserialize, Serialize};

use crate::engine::{Call, GpuModel};
use crate::error::{Error, Result};
use crate::scheduler::{
    decide_retention, mlfq_order, plan_tick, MlfqConfig, PlanContext, PlanOptions, RetentionConfig,
    RetentionDecision, RetentionInput, SchedulerConfig, TickPlan, VictimOrder,
};
use crate::time::SimTime;

fn default_ttl() -> f64 {
    30.0
}

fn default_multiplier() -> f64 {
    1.5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Fcfs,
    ProgramPriority,
    StaticTtl {
        #[serde(default = "default_ttl")]
        ttl_seconds: f64,
    },
    DynamicTtl {
        #[serde(default = "default_multiplier")]
        multiplier: f64,
    },
    #[default]
    Mars,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::ProgramPriority => "program_priority",
            PolicyKind::StaticTtl { .. } => "static_ttl",
            PolicyKind::DynamicTtl { .. } => "dynamic_ttl",
            PolicyKind::Mars => "mars",
        }
    }

    /// Parses a policy name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.replace('-', "_").as_str() {
            "fcfs" => PolicyKind::Fcfs,
            "program_priority" => PolicyKind::ProgramPriority,
            "static_ttl" => PolicyKind::StaticTtl { ttl_seconds: default_ttl() },
            "dynamic_ttl" => PolicyKind::DynamicTtl {
                multiplier: default_multiplier(),
            },
            "mars" => PolicyKind::Mars,
            other => return Err(Error::config("policy.kind", format!("unknown policy `{other}`"))),
        })
    }

    pub fn all_defaults() -> Vec<PolicyKind> {
        ["fcfs", "program_priority", "static_ttl", "dynamic_ttl", "mars"]
            .iter()
            .map(|n| Self::from_name(n).expect("known policy"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyKind::StaticTtl { ttl_seconds } if !(*ttl_seconds >= 0.0) => {
                Err(Error::config("policy.ttl_seconds", "must be >= 0"))
            }
            PolicyKind::DynamicTtl { multiplier } if !(*multiplier > 0.0) => {
                Err(Error::config("policy.multiplier", "must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Mechanism switches for the full policy; baselines ignore them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// MLFQ ordering, level-aware planning and priority-aligned victims.
    pub coordinator: bool,
    /// Chunk shrinking and pinned-state management; off implies no retention.
    pub coscheduler: bool,
    /// Benefit/cost pinning at tool boundaries alone.
    pub retention: bool,
    pub control_plane: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            coordinator: true,
            coscheduler: true,
            retention: true,
            control_plane: true,
        }
    }
}

impl Ablation {
    pub fn disable(&mut self, mechanism: &str) -> Result<()> {
        match mechanism.replace('_', "-").as_str() {
            "coordinator" => self.coordinator = false,
            "coscheduler" | "co-scheduler" => self.coscheduler = false,
            "retention" => self.retention = false,
            "control-plane" => self.control_plane = false,
            other => return Err(Error::config("ablation", format!("unknown mechanism `{other}`"))),
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.coordinator {
            off.push("coordinator");
        }
        if !self.coscheduler {
            off.push("coscheduler");
        }
        if !self.retention {
            off.push("retention");
        }
        if !self.control_plane {
            off.push("control-plane");
        }
        if off.is_empty() {
            "full".into()
        } else {
            format!("no-{}", off.join("+"))
        }
    }
}

/// Arrival order of the current request, then session id.
pub fn fifo_order(calls: &[Call], ready: &[usize]) -> Vec<usize> {
    let mut order = ready.to_vec();
    order.sort_by_key(|&i| (calls[i].enqueue_time, calls[i].session_id));
    order
}

/// Least attained service at session level first.
pub fn program_priority_order(calls: &[Call], ready: &[usize]) -> Vec<usize> {
    let mut order = ready.to_vec();
    order.sort_by_key(|&i| (calls[i].served_tokens, calls[i].enqueue_time, calls[i].session_id));
    order
}

fn baseline_options(budget: u64, max_decode_slots: usize, head_of_line: bool) -> PlanOptions {
    PlanOptions {
        budget,
        max_decode_slots,
        window: usize::MAX,
        shrink: false,
        head_of_line,
        victims: VictimOrder::EarliestDeadline,
        use_levels: false,
    }
}

pub fn fcfs_policy(ctx: &mut PlanContext<'_>, ready: &[usize], gpu: &GpuModel) -> Result<TickPlan> {
    let order = fifo_order(ctx.calls, ready);
    plan_tick(ctx, &order, &baseline_options(gpu.token_budget_per_tick, gpu.max_decode_slots, true))
}

pub fn program_priority_policy(ctx: &mut PlanContext<'_>, ready: &[usize], gpu: &GpuModel) -> Result<TickPlan> {
    let order = program_priority_order(ctx.calls, ready);
    plan_tick(ctx, &order, &baseline_options(gpu.token_budget_per_tick, gpu.max_decode_slots, false))
}

fn pin_until(deadline: Option<SimTime>) -> RetentionDecision {
    RetentionDecision {
        pin: true,
        benefit_s: 0.0,
        cost_s: 0.0,
        deadline,
    }
}

pub fn static_ttl_policy(now: SimTime, ttl_seconds: f64) -> RetentionDecision {
    pin_until(Some(now + SimTime::from_secs_f64(ttl_seconds)))
}

pub fn dynamic_ttl_policy(now: SimTime, multiplier: f64, ema_tool_s: f64) -> RetentionDecision {
    pin_until(Some(now + SimTime::from_secs_f64(multiplier * ema_tool_s)))
}

const NO_PIN: RetentionDecision = RetentionDecision {
    pin: false,
    benefit_s: 0.0,
    cost_s: 0.0,
    deadline: None,
};

#[derive(Debug, Clone, PartialEq)]
enum Role {
    Shared(PolicyKind),
    /// Concurrency-one replay: always warm, never queued.
    Isolation,
}

/// A configured policy as the simulator consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    role: Role,
    pub ablation: Ablation,
    pub mlfq: MlfqConfig,
    pub retention: RetentionConfig,
    pub budget: u64,
    pub max_decode_slots: usize,
    pub window: usize,
}

impl Policy {
    pub fn new(kind: PolicyKind, ablation: Ablation, sched: &SchedulerConfig, gpu: &GpuModel) -> Self {
        Self {
            role: Role::Shared(kind),
            ablation,
            mlfq: sched.mlfq(),
            retention: sched.retention(),
            budget: sched.max_batched_tokens.unwrap_or(gpu.token_budget_per_tick),
            max_decode_slots: gpu.max_decode_slots,
            window: sched.window_size.unwrap_or(2 * gpu.max_decode_slots),
        }
    }

    pub fn isolation(gpu: &GpuModel) -> Self {
        let mut p = Self::new(PolicyKind::Fcfs, Ablation::default(), &SchedulerConfig::default(), gpu);
        p.role = Role::Isolation;
        p
    }

    pub fn name(&self) -> &'static str {
        match &self.role {
            Role::Shared(k) => k.name(),
            Role::Isolation => "isolation",
        }
    }

    fn is_mars(&self) -> bool {
        self.role == Role::Shared(PolicyKind::Mars)
    }

    pub fn uses_admission_control(&self) -> bool {
        self.is_mars() && self.ablation.control_plane
    }

    pub fn uses_mlfq(&self) -> bool {
        self.is_mars() && self.ablation.coordinator
    }

    pub fn order(&self, calls: &mut [Call], ready: &[usize], now: SimTime) -> Vec<usize> {
        match &self.role {
            Role::Shared(PolicyKind::ProgramPriority) => program_priority_order(calls, ready),
            Role::Shared(PolicyKind::Mars) if self.ablation.coordinator => mlfq_order(calls, ready, now, &self.mlfq),
            _ => fifo_order(calls, ready),
        }
    }

    pub fn options(&self) -> PlanOptions {
        let all = |head_of_line| PlanOptions {
            window: usize::MAX,
            ..baseline_options(self.budget, self.max_decode_slots, head_of_line)
        };
        match &self.role {
            Role::Isolation => PlanOptions {
                shrink: true,
                ..all(false)
            },
            Role::Shared(PolicyKind::Mars) => PlanOptions {
                budget: self.budget,
                max_decode_slots: self.max_decode_slots,
                window: self.window,
                shrink: self.ablation.coscheduler,
                head_of_line: false,
                victims: if self.ablation.coordinator {
                    VictimOrder::PriorityAligned
                } else {
                    VictimOrder::EarliestDeadline
                },
                use_levels: self.ablation.coordinator,
            },
            Role::Shared(PolicyKind::ProgramPriority) => all(false),
            Role::Shared(_) => all(true),
        }
    }

    /// TTL baselines drop a pin when its deadline passes; otherwise an
    /// expired pin stays resident and only becomes the first reclaim victim.
    pub fn releases_on_expiry(&self) -> bool {
        matches!(
            self.role,
            Role::Shared(PolicyKind::StaticTtl { .. } | PolicyKind::DynamicTtl { .. })
        )
    }

    pub fn retention_decision(&self, input: &RetentionInput) -> RetentionDecision {
        match &self.role {
            Role::Isolation => pin_until(None),
            Role::Shared(PolicyKind::StaticTtl { ttl_seconds }) => static_ttl_policy(input.now, *ttl_seconds),
            Role::Shared(PolicyKind::DynamicTtl { multiplier }) => {
                dynamic_ttl_policy(input.now, *multiplier, input.ema_tool_s)
            }
            Role::Shared(PolicyKind::Mars) if self.ablation.retention && self.ablation.coscheduler => {
                decide_retention(input, &self.retention)
            }
            _ => NO_PIN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Phase;

    fn call(id: u64, enqueue: u64, served: u64) -> Call {
        let mut c = Call::new(id, SimTime(enqueue), 1);
        c.set_phase(Phase::Prefill);
        c.enqueue_time = SimTime(enqueue);
        c.served_tokens = served;
        c
    }

    #[test]
    fn least_attained_service_first() {
        let calls = vec![call(1, 0, 10_000), call(2, 5, 100), call(3, 9, 0)];
        assert_eq!(program_priority_order(&calls, &[0, 1, 2]), vec![2, 1, 0]);
        assert_eq!(fifo_order(&calls, &[2, 1, 0]), vec![0, 1, 2]);
    }

    #[test]
    fn ttl_thresholds() {
        let now = SimTime::from_secs_f64(100.0);
        let d = static_ttl_policy(now, 30.0);
        let deadline = d.deadline.unwrap();
        assert!(now + SimTime::from_secs_f64(29.0) < deadline);
        assert!(now + SimTime::from_secs_f64(31.0) > deadline);
        let d = dynamic_ttl_policy(now, 1.5, 4.0);
        assert_eq!(d.deadline, Some(SimTime::from_secs_f64(106.0)));
    }

    #[test]
    fn names_round_trip() {
        for k in PolicyKind::all_defaults() {
            assert_eq!(PolicyKind::from_name(k.name()).unwrap(), k);
        }
        assert!(PolicyKind::from_name("lottery").is_err());
        let mut a = Ablation::default();
        a.disable("control-plane").unwrap();
        assert_eq!(a.label(), "no-control-plane");
        assert!(a.disable("everything").is_err());
    }
}
