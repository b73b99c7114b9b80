//! Per-tick batch construction: decode slots first, then prefill chunks in
//! service order, reclaiming memory when a chunk does not fit.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::engine::{Call, KvPool, Phase};
use crate::error::Result;
use crate::scheduler::priority::{promote_waiting, MlfqConfig};
use crate::scheduler::reclaim::{reclaim_for, Candidate, Eviction, EvictionKind, VictimOrder};
use crate::scheduler::retention::PinnedRegistry;
use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TickPlan {
    pub decodes: Vec<SessionId>,
    pub prefill: Vec<(SessionId, u64)>,
    pub evictions: Vec<Eviction>,
    pub total_tokens: u64,
}

impl TickPlan {
    pub fn is_empty(&self) -> bool {
        self.decodes.is_empty() && self.prefill.is_empty()
    }

    /// Sessions preempted while building this plan.
    pub fn preempted(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.evictions
            .iter()
            .filter(|e| e.kind == EvictionKind::Running)
            .map(|e| e.session)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub budget: u64,
    pub max_decode_slots: usize,
    /// Only the first `window` calls of the service order are considered.
    pub window: usize,
    /// Shrink prefill chunks to the free memory instead of all-or-nothing.
    pub shrink: bool,
    /// Stop the prefill pass at the first chunk that cannot be placed.
    pub head_of_line: bool,
    pub victims: VictimOrder,
    /// Whether MLFQ levels inform victim choice.
    pub use_levels: bool,
}

/// Largest grant `<= desired` whose extra blocks fit in the free pool,
/// aligned down to a block boundary when shrunk. Allocates on success.
pub fn try_fit(call: &Call, desired: u64, pool: &mut KvPool) -> Result<u64> {
    let bs = pool.block_size();
    let held = pool.allocated_to(call.session_id);
    let capacity = ((held + pool.free_blocks()) * bs).saturating_sub(call.kv_tokens);
    let grant = desired.min(capacity);
    if grant == 0 {
        return Ok(0);
    }
    let extra = pool.blocks_for(call.kv_tokens + grant).saturating_sub(held);
    if extra > 0 {
        pool.allocate(call.session_id, extra)?;
    }
    Ok(grant)
}

pub struct PlanContext<'a> {
    pub calls: &'a mut [Call],
    pub index: &'a BTreeMap<SessionId, usize>,
    pub pool: &'a mut KvPool,
    pub pinned: &'a mut PinnedRegistry,
    pub now: SimTime,
}

struct Planner<'a, 'b> {
    ctx: &'b mut PlanContext<'a>,
    order: &'b [usize],
    opts: PlanOptions,
    plan: TickPlan,
    budget_left: u64,
    preempted: BTreeSet<usize>,
}

impl Planner<'_, '_> {
    fn level_of(&self, idx: usize) -> usize {
        if self.opts.use_levels {
            self.ctx.calls[idx].priority.level
        } else {
            0
        }
    }

    /// Evicts until `needed` blocks are free. Running victims must come
    /// strictly after `rank` in the service order.
    fn reclaim(&mut self, needed: u64, rank: usize) -> Result<bool> {
        let pinned: Vec<Candidate> = self
            .ctx
            .pinned
            .values()
            .map(|p| Candidate {
                session: p.session_id,
                blocks: self.ctx.pool.pinned_to(p.session_id),
                level: self.ctx.index.get(&p.session_id).map_or(0, |&i| self.level_of(i)),
                deadline: p.retention_deadline,
                rank: usize::MAX,
            })
            .collect();
        let running: Vec<Candidate> = self.order[rank + 1..]
            .iter()
            .enumerate()
            .filter(|(_, &i)| !self.preempted.contains(&i))
            .filter_map(|(off, &i)| {
                let sid = self.ctx.calls[i].session_id;
                let blocks = self.ctx.pool.allocated_to(sid);
                (blocks > 0).then(|| Candidate {
                    session: sid,
                    blocks,
                    level: self.level_of(i),
                    deadline: None,
                    rank: rank + 1 + off,
                })
            })
            .collect();
        let evictions = reclaim_for(
            needed,
            self.ctx.pool.free_blocks(),
            &pinned,
            &running,
            self.opts.victims,
            self.ctx.now,
        );
        if evictions.is_empty() {
            return Ok(false);
        }
        for e in evictions {
            self.ctx.pool.free(e.session);
            match e.kind {
                EvictionKind::Pinned => {
                    self.ctx.pinned.remove(&e.session);
                }
                EvictionKind::Running => {
                    let idx = self.ctx.index[&e.session];
                    self.ctx.calls[idx].preempt();
                    self.preempted.insert(idx);
                    if let Some(pos) = self.plan.decodes.iter().position(|&s| s == e.session) {
                        self.plan.decodes.remove(pos);
                        self.budget_left += 1;
                    }
                }
            }
            self.plan.evictions.push(e);
        }
        Ok(true)
    }

    fn decode_pass(&mut self, window: usize) -> Result<()> {
        for rank in 0..window {
            if self.plan.decodes.len() >= self.opts.max_decode_slots || self.budget_left == 0 {
                break;
            }
            let idx = self.order[rank];
            let call = &self.ctx.calls[idx];
            if call.phase != Phase::Decode || call.remaining_decode == 0 || self.preempted.contains(&idx) {
                continue;
            }
            let sid = call.session_id;
            let held = self.ctx.pool.allocated_to(sid);
            let needs_block = call.kv_tokens + 1 > held * self.ctx.pool.block_size();
            if needs_block {
                if self.ctx.pool.free_blocks() == 0 && !self.reclaim(1, rank)? {
                    continue;
                }
                self.ctx.pool.allocate(sid, 1)?;
            }
            self.plan.decodes.push(sid);
            self.budget_left -= 1;
        }
        Ok(())
    }

    fn prefill_pass(&mut self, window: usize) -> Result<()> {
        for rank in 0..window {
            if self.budget_left == 0 {
                break;
            }
            let idx = self.order[rank];
            if self.ctx.calls[idx].phase != Phase::Prefill {
                continue;
            }
            if self.preempted.contains(&idx) {
                if self.opts.head_of_line {
                    break;
                }
                continue;
            }
            let desired = self.ctx.calls[idx].remaining_prefill.min(self.budget_left);
            if desired == 0 {
                continue;
            }
            let grant = self.place_chunk(idx, rank, desired)?;
            if grant == 0 {
                if self.opts.head_of_line {
                    break;
                }
                continue;
            }
            self.plan.prefill.push((self.ctx.calls[idx].session_id, grant));
            self.budget_left -= grant;
        }
        Ok(())
    }

    fn place_chunk(&mut self, idx: usize, rank: usize, desired: u64) -> Result<u64> {
        let call = &self.ctx.calls[idx];
        let held = self.ctx.pool.allocated_to(call.session_id);
        let need = self.ctx.pool.blocks_for(call.kv_tokens + desired).saturating_sub(held);
        if self.opts.shrink {
            let g = try_fit(&self.ctx.calls[idx], desired, self.ctx.pool)?;
            if g > 0 {
                return Ok(g);
            }
            if self.reclaim(need, rank)? || self.reclaim(1, rank)? {
                return try_fit(&self.ctx.calls[idx], desired, self.ctx.pool);
            }
            return Ok(0);
        }
        if need > self.ctx.pool.free_blocks() && !self.reclaim(need, rank)? {
            return Ok(0);
        }
        if need > 0 {
            self.ctx.pool.allocate(self.ctx.calls[idx].session_id, need)?;
        }
        Ok(desired)
    }
}

/// Builds one tick's batch over `order`, the ready calls in service order.
/// Allocations and evictions are applied to the pool as the plan is built.
pub fn plan_tick(ctx: &mut PlanContext<'_>, order: &[usize], opts: &PlanOptions) -> Result<TickPlan> {
    let window = opts.window.min(order.len());
    let mut p = Planner {
        ctx,
        order,
        opts: *opts,
        plan: TickPlan::default(),
        budget_left: opts.budget,
        preempted: BTreeSet::new(),
    };
    p.decode_pass(window)?;
    p.prefill_pass(window)?;
    let mut plan = p.plan;
    plan.total_tokens = plan.decodes.len() as u64 + plan.prefill.iter().map(|(_, g)| g).sum::<u64>();
    Ok(plan)
}

/// Service order of the MLFQ: level, then submission time, then session id.
/// Waiting calls are promoted first.
pub fn mlfq_order(calls: &mut [Call], ready: &[usize], now: SimTime, mlfq: &MlfqConfig) -> Vec<usize> {
    for &i in ready {
        promote_waiting(&mut calls[i].priority, now, mlfq);
    }
    let mut order = ready.to_vec();
    order.sort_by_key(|&i| (calls[i].priority.level, calls[i].enqueue_time, calls[i].session_id));
    order
}

/// MLFQ ordering followed by windowed planning.
pub fn select_batch(ctx: &mut PlanContext<'_>, ready: &[usize], mlfq: &MlfqConfig, opts: &PlanOptions) -> Result<TickPlan> {
    let order = mlfq_order(ctx.calls, ready, ctx.now, mlfq);
    plan_tick(ctx, &order, opts)
}
