//! Invariant audits replayed from a run's event log.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::engine::Phase;
use crate::error::{Error, Result};
use crate::info_stream::{Signal, SubmitCause};
use crate::log::{EngineOp, FreeReason, LogBody, LogRecord};
use crate::sim::SessionOutcome;
use crate::workload::{SessionId, SessionTrace};

fn violation(invariant: &'static str, seq: u64, detail: impl Into<String>) -> Error {
    Error::Invariant {
        invariant,
        seq,
        detail: detail.into(),
    }
}

/// Replays every pool operation and checks block conservation after each.
pub fn audit_conservation(log: &[LogRecord], total_blocks: u64) -> Result<()> {
    let mut allocated: BTreeMap<SessionId, u64> = BTreeMap::new();
    let mut pinned: BTreeMap<SessionId, u64> = BTreeMap::new();
    let mut free = total_blocks as i128;
    const INV: &str = "kv_conservation";
    for r in log {
        let Some(op) = r.engine() else { continue };
        let sid = r.session_id;
        let need_sid = || sid.ok_or_else(|| violation(INV, r.seq, "pool operation without a session"));
        match op {
            EngineOp::Tick { .. } => continue,
            EngineOp::Alloc { blocks } => {
                let s = need_sid()?;
                if pinned.contains_key(&s) {
                    return Err(violation(INV, r.seq, format!("alloc for pinned session {s}")));
                }
                *allocated.entry(s).or_default() += blocks;
                free -= *blocks as i128;
            }
            EngineOp::Free { blocks, .. } => {
                let s = need_sid()?;
                let held = allocated.remove(&s).or_else(|| pinned.remove(&s)).unwrap_or(0);
                if held != *blocks {
                    return Err(violation(INV, r.seq, format!("session {s} freed {blocks} blocks but held {held}")));
                }
                free += *blocks as i128;
            }
            EngineOp::Pin { blocks } => {
                let s = need_sid()?;
                let held = allocated.remove(&s).unwrap_or(0);
                if held != *blocks || held == 0 {
                    return Err(violation(INV, r.seq, format!("session {s} pinned {blocks} of {held} blocks")));
                }
                pinned.insert(s, held);
            }
            EngineOp::Unpin { blocks } => {
                let s = need_sid()?;
                let held = pinned.remove(&s).unwrap_or(0);
                if held != *blocks || held == 0 {
                    return Err(violation(INV, r.seq, format!("session {s} unpinned {blocks} of {held} blocks")));
                }
                allocated.insert(s, held);
            }
        }
        let sum = free + allocated.values().sum::<u64>() as i128 + pinned.values().sum::<u64>() as i128;
        if free < 0 || sum != total_blocks as i128 {
            return Err(violation(INV, r.seq, format!("free {free}, accounted {sum} of {total_blocks}")));
        }
    }
    Ok(())
}

/// Every tick stays within the token budget and its totals match its grants.
pub fn audit_budget(log: &[LogRecord], budget: u64) -> Result<()> {
    for r in log {
        if let Some(EngineOp::Tick {
            prefill_tokens,
            decode_tokens,
            grants,
            decodes,
            ..
        }) = r.engine()
        {
            let granted: u64 = grants.iter().map(|g| g[1]).sum();
            if granted != *prefill_tokens || decodes.len() as u64 != *decode_tokens {
                return Err(violation("budget_compliance", r.seq, "tick totals disagree with grants"));
            }
            if prefill_tokens + decode_tokens > budget {
                return Err(violation(
                    "budget_compliance",
                    r.seq,
                    format!("{} tokens in a tick with budget {budget}", prefill_tokens + decode_tokens),
                ));
            }
        }
    }
    Ok(())
}

/// Rebuilds each session's phase sequence from the log, checks it against
/// the phase grammar (plus the preemption restart edge) and joins it with
/// the phase history the simulator recorded.
pub fn audit_phases(log: &[LogRecord], sessions: &[SessionOutcome]) -> Result<()> {
    const INV: &str = "phase_legality";
    let mut state: BTreeMap<SessionId, Vec<Phase>> = sessions
        .iter()
        .map(|s| (s.session_id, vec![Phase::WaitingAdmission]))
        .collect();
    let mut preempt_pending: BTreeSet<SessionId> = BTreeSet::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, r) in log.iter().enumerate() {
        if r.seq != i as u64 || r.t < last_t {
            return Err(violation(INV, r.seq, "log is not in (time, seq) order"));
        }
        last_t = r.t;
        let Some(sid) = r.session_id else { continue };
        if let Some(EngineOp::Free {
            reason: FreeReason::Preempt,
            ..
        }) = r.engine()
        {
            preempt_pending.insert(sid);
            continue;
        }
        let Some(sig) = r.signal() else { continue };
        let hist = state
            .get_mut(&sid)
            .ok_or_else(|| violation(INV, r.seq, format!("event for unknown session {sid}")))?;
        let cur = *hist.last().expect("non-empty history");
        let next = match (cur, sig) {
            (Phase::WaitingAdmission, Signal::GpuSubmit { cause: SubmitCause::Admit, .. }) => Some(Phase::Prefill),
            (Phase::Prefill, Signal::GpuFirstToken { .. }) => Some(Phase::Decode),
            (Phase::Prefill | Phase::Decode, Signal::GpuSubmit { cause: SubmitCause::Preempt, .. }) => {
                if !preempt_pending.remove(&sid) {
                    return Err(violation(INV, r.seq, format!("session {sid} restarted without a preemption")));
                }
                Some(Phase::Prefill)
            }
            (Phase::Decode, Signal::GpuEnd { final_round, .. }) => {
                Some(if *final_round { Phase::Done } else { Phase::Tool })
            }
            (Phase::Tool, Signal::ToolStart { .. }) => None,
            (Phase::Tool, Signal::ToolEnd { .. }) => Some(Phase::WaitingResume),
            (Phase::WaitingResume, Signal::GpuSubmit { cause: SubmitCause::Resume, .. }) => Some(Phase::Prefill),
            (p, s) => {
                return Err(violation(
                    INV,
                    r.seq,
                    format!("session {sid}: {} in phase {}", s.kind(), p.name()),
                ))
            }
        };
        if let Some(p) = next {
            hist.push(p);
        }
    }
    for s in sessions {
        let derived = &state[&s.session_id];
        if derived.last() != Some(&Phase::Done) {
            return Err(violation(INV, log.len() as u64, format!("session {} never finished", s.session_id)));
        }
        if *derived != s.history {
            return Err(violation(
                "telemetry_join",
                log.len() as u64,
                format!("session {}: log phases differ from recorded history", s.session_id),
            ));
        }
    }
    Ok(())
}

struct OpenRound {
    round: usize,
    expected: u64,
    granted: u64,
}

/// Each submission's prefill equals the round's new tokens when resumed
/// warm and its full context otherwise, and the granted chunks add up to it.
pub fn audit_warm_cold(log: &[LogRecord], traces: &[SessionTrace]) -> Result<()> {
    const INV: &str = "warm_cold_accounting";
    let by_id: BTreeMap<SessionId, &SessionTrace> = traces.iter().map(|t| (t.session_id, t)).collect();
    let mut open: BTreeMap<SessionId, OpenRound> = BTreeMap::new();
    let mut unpinned: BTreeSet<SessionId> = BTreeSet::new();
    for r in log {
        match (r.session_id, &r.body) {
            (_, LogBody::Engine(EngineOp::Tick { grants, .. })) => {
                for g in grants {
                    let o = open
                        .get_mut(&g[0])
                        .ok_or_else(|| violation(INV, r.seq, format!("grant to session {} with no open round", g[0])))?;
                    o.granted += g[1];
                    if o.granted > o.expected {
                        return Err(violation(INV, r.seq, format!("session {} over-granted", g[0])));
                    }
                }
            }
            (Some(s), LogBody::Engine(EngineOp::Unpin { .. })) => {
                unpinned.insert(s);
            }
            (Some(s), LogBody::Signal(Signal::GpuSubmit {
                round,
                prefill_tokens,
                warm,
                cause,
                ..
            })) => {
                let trace = by_id
                    .get(&s)
                    .ok_or_else(|| violation(INV, r.seq, format!("unknown session {s}")))?;
                let spec = trace
                    .rounds
                    .get(*round)
                    .ok_or_else(|| violation(INV, r.seq, format!("session {s} has no round {round}")))?;
                let full = trace.context_before(*round) + spec.new_prefill_tokens;
                let was_pinned = unpinned.remove(&s);
                let expected = match cause {
                    SubmitCause::Resume if *warm != was_pinned => {
                        return Err(violation(INV, r.seq, format!("session {s} warm={warm} but pinned={was_pinned}")))
                    }
                    SubmitCause::Resume if *warm => spec.new_prefill_tokens,
                    _ if *warm => return Err(violation(INV, r.seq, format!("session {s} warm outside a resume"))),
                    _ => full,
                };
                if *prefill_tokens != expected {
                    return Err(violation(
                        INV,
                        r.seq,
                        format!("session {s} round {round}: prefill {prefill_tokens}, expected {expected}"),
                    ));
                }
                if let Some(prev) = open.remove(&s) {
                    if *cause != SubmitCause::Preempt || prev.round != *round {
                        return Err(violation(INV, r.seq, format!("session {s} resubmitted an unfinished round")));
                    }
                }
                open.insert(
                    s,
                    OpenRound {
                        round: *round,
                        expected,
                        granted: 0,
                    },
                );
            }
            (Some(s), LogBody::Signal(Signal::GpuFirstToken { round, .. })) => {
                let o = open
                    .remove(&s)
                    .ok_or_else(|| violation(INV, r.seq, format!("session {s} first token without a submission")))?;
                if o.round != *round || o.granted != o.expected {
                    return Err(violation(
                        INV,
                        r.seq,
                        format!("session {s} round {round}: granted {} of {}", o.granted, o.expected),
                    ));
                }
            }
            _ => {}
        }
    }
    if let Some((s, _)) = open.iter().next() {
        return Err(violation(INV, log.len() as u64, format!("session {s} has an unfinished prefill")));
    }
    Ok(())
}

/// At every admission decision the logged active count matches an
/// independent count, and no more sessions are admitted than free slots.
pub fn audit_admission(log: &[LogRecord]) -> Result<()> {
    const INV: &str = "admission_window";
    let controlled = log
        .iter()
        .any(|r| matches!(r.signal(), Some(Signal::WindowUpdate { .. })));
    if !controlled {
        return Ok(());
    }
    let mut active = 0usize;
    let mut pending = 0usize;
    for r in log {
        match r.signal() {
            Some(Signal::WindowUpdate {
                limit,
                active_sessions,
                admitted,
                ..
            }) => {
                if *active_sessions != active {
                    return Err(violation(INV, r.seq, format!("logged {active_sessions} active, counted {active}")));
                }
                if active + admitted > (*limit).max(active) {
                    return Err(violation(
                        INV,
                        r.seq,
                        format!("admitted {admitted} with {active} active under limit {limit}"),
                    ));
                }
                pending = *admitted;
            }
            Some(Signal::GpuSubmit {
                cause: SubmitCause::Admit,
                ..
            }) => {
                if pending == 0 {
                    return Err(violation(INV, r.seq, "admission outside a window decision"));
                }
                pending -= 1;
                active += 1;
            }
            Some(Signal::GpuEnd { final_round: true, .. }) => active -= 1,
            _ => {}
        }
    }
    Ok(())
}

/// Pinned residency never outlives the TTL.
pub fn audit_ttl(log: &[LogRecord], ttl_seconds: f64) -> Result<()> {
    let mut since: BTreeMap<SessionId, f64> = BTreeMap::new();
    for r in log {
        let Some(s) = r.session_id else { continue };
        match r.engine() {
            Some(EngineOp::Pin { .. }) => {
                since.insert(s, r.t);
            }
            Some(EngineOp::Unpin { .. } | EngineOp::Free { .. }) => {
                if let Some(t0) = since.remove(&s) {
                    if r.t - t0 > ttl_seconds + 1e-6 {
                        return Err(violation(
                            "ttl_residency",
                            r.seq,
                            format!("session {s} pinned for {} s", r.t - t0),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Under arrival-order service the sessions granted prefill in a tick are a
/// prefix of the waiting prefills ordered by round submission time.
pub fn audit_fcfs_order(log: &[LogRecord]) -> Result<()> {
    let mut submitted: BTreeMap<SessionId, f64> = BTreeMap::new();
    let mut waiting: BTreeMap<SessionId, f64> = BTreeMap::new();
    for r in log {
        match (r.session_id, &r.body) {
            (Some(s), LogBody::Signal(Signal::GpuSubmit { cause, .. })) => {
                if *cause != SubmitCause::Preempt {
                    submitted.insert(s, r.t);
                }
                let key = submitted
                    .get(&s)
                    .copied()
                    .ok_or_else(|| violation("fcfs_order", r.seq, format!("session {s} restarted before submission")))?;
                waiting.insert(s, key);
            }
            (Some(s), LogBody::Signal(Signal::GpuFirstToken { .. })) => {
                waiting.remove(&s);
            }
            (None, LogBody::Engine(EngineOp::Tick { grants, .. })) => {
                let mut order: Vec<(f64, SessionId)> = waiting.iter().map(|(&s, &t)| (t, s)).collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let granted: BTreeSet<SessionId> = grants.iter().map(|g| g[0]).collect();
                let prefix: BTreeSet<SessionId> = order.iter().take(granted.len()).map(|x| x.1).collect();
                if granted != prefix {
                    return Err(violation("fcfs_order", r.seq, "prefill grants skip an earlier request"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Within each planning step, pinned reclaims precede running preemptions.
pub fn audit_eviction_order(log: &[LogRecord]) -> Result<()> {
    let mut preempted = false;
    let mut t = f64::NEG_INFINITY;
    for r in log {
        if r.t != t {
            t = r.t;
            preempted = false;
        }
        match r.engine() {
            Some(EngineOp::Tick { .. }) => preempted = false,
            Some(EngineOp::Free {
                reason: FreeReason::Preempt,
                ..
            }) => preempted = true,
            Some(EngineOp::Free {
                reason: FreeReason::Reclaim,
                ..
            }) if preempted => {
                return Err(violation("eviction_order", r.seq, "pinned reclaim after a running preemption"));
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct AuditSpec {
    pub total_blocks: u64,
    pub budget: u64,
    pub ttl_seconds: Option<f64>,
    pub arrival_order: bool,
}

pub fn audit_all(
    log: &[LogRecord],
    sessions: &[SessionOutcome],
    traces: &[SessionTrace],
    spec: &AuditSpec,
) -> Vec<AuditOutcome> {
    let mut checks: Vec<(&'static str, Result<()>)> = vec![
        ("kv_conservation", audit_conservation(log, spec.total_blocks)),
        ("budget_compliance", audit_budget(log, spec.budget)),
        ("phase_legality", audit_phases(log, sessions)),
        ("warm_cold_accounting", audit_warm_cold(log, traces)),
        ("admission_window", audit_admission(log)),
        ("eviction_order", audit_eviction_order(log)),
    ];
    if let Some(ttl) = spec.ttl_seconds {
        checks.push(("ttl_residency", audit_ttl(log, ttl)));
    }
    if spec.arrival_order {
        checks.push(("fcfs_order", audit_fcfs_order(log)));
    }
    checks
        .into_iter()
        .map(|(name, r)| AuditOutcome {
            name,
            passed: r.is_ok(),
            detail: r.err().map(|e| e.to_string()).unwrap_or_default(),
        })
        .collect()
}
