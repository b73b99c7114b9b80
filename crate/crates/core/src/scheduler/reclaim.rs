//! Victim selection when a grant needs more blocks than are free.

use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionKind {
    Pinned,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub session: SessionId,
    pub kind: EvictionKind,
    pub blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub session: SessionId,
    pub blocks: u64,
    pub level: usize,
    pub deadline: Option<SimTime>,
    /// Position in the policy's service order; larger is served later.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimOrder {
    /// Expired pins first, then lowest level and largest footprint first.
    PriorityAligned,
    /// Pins by earliest deadline, running calls from the back of the order.
    EarliestDeadline,
}

/// Orders pinned then running candidates by eviction preference.
pub fn eviction_order(pinned: &[Candidate], running: &[Candidate], order: VictimOrder, now: SimTime) -> Vec<Eviction> {
    let mut p = pinned.to_vec();
    let mut r = running.to_vec();
    match order {
        VictimOrder::PriorityAligned => {
            p.sort_by_key(|c| {
                let expired = c.deadline.is_some_and(|d| d <= now);
                (!expired, Reverse(c.level), Reverse(c.blocks), c.session)
            });
            r.sort_by_key(|c| (Reverse(c.level), Reverse(c.blocks), c.session));
        }
        VictimOrder::EarliestDeadline => {
            p.sort_by_key(|c| (c.deadline.unwrap_or(SimTime::MAX), c.session));
            r.sort_by_key(|c| (Reverse(c.rank), c.session));
        }
    }
    let tag = |kind| move |c: Candidate| Eviction {
        session: c.session,
        kind,
        blocks: c.blocks,
    };
    p.into_iter()
        .map(tag(EvictionKind::Pinned))
        .chain(r.into_iter().map(tag(EvictionKind::Running)))
        .collect()
}

/// Shortest prefix of the eviction order that brings the free count to
/// `needed_blocks`. Empty when no eviction is needed or when evicting every
/// candidate would still fall short.
pub fn reclaim_for(
    needed_blocks: u64,
    free_blocks: u64,
    pinned: &[Candidate],
    running: &[Candidate],
    order: VictimOrder,
    now: SimTime,
) -> Vec<Eviction> {
    if free_blocks >= needed_blocks {
        return Vec::new();
    }
    let mut freed = 0;
    let mut out = Vec::new();
    for e in eviction_order(pinned, running, order, now) {
        freed += e.blocks;
        out.push(e);
        if free_blocks + freed >= needed_blocks {
            return out;
        }
    }
    Vec::new()
}
