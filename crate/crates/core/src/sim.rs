//! Event-driven simulation loop tying workload, engine, telemetry, control
//! plane and policy together.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::baselines::Policy;
use crate::control::{balance_and_admit, ControllerConfig, ControllerState, QueueEntry};
use crate::engine::{resume_cost, step_gpu, BatchItem, Call, GpuModel, KvPool, Phase, PoolOp, SimClock, ToolPlane, ToolStart};
use crate::error::{Error, Result};
use crate::info_stream::{record, refresh_pressure, PressureConfig, Signal, SubmitCause, Telemetry, TelemetryEvent};
use crate::log::{EngineOp, EventLog, FreeReason, LogRecord};
use crate::scheduler::{
    charge_service, plan_tick, Eviction, PinnedRegistry, PinnedSession, PlanContext, PriorityState, RetentionInput,
    TickPlan,
};
use crate::time::SimTime;
use crate::workload::{SessionId, SessionTrace};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub gpu: GpuModel,
    pub block_size: u64,
    pub total_blocks: u64,
    pub worker_slots: usize,
    pub policy: Policy,
    pub controller: ControllerConfig,
    pub pressure: PressureConfig,
}

impl SimConfig {
    /// Smallest pool that fits every session's final context.
    pub fn min_blocks(traces: &[SessionTrace], block_size: u64) -> u64 {
        traces.iter().map(|t| t.peak_blocks(block_size)).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionRecord {
    TickPlan {
        t: f64,
        decodes: usize,
        prefill: Vec<[u64; 2]>,
        evictions: Vec<Eviction>,
        total_tokens: u64,
    },
    Retention {
        t: f64,
        session_id: SessionId,
        round: usize,
        pin: bool,
        benefit_s: f64,
        cost_s: f64,
        deadline_s: Option<f64>,
        ema_tool_s: f64,
        kv_usage_ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetrySnapshot {
    pub t: f64,
    pub w_adm: f64,
    #[serde(flatten)]
    pub telemetry: Telemetry,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionOutcome {
    pub session_id: SessionId,
    pub arrival_s: f64,
    pub admitted_s: f64,
    pub completion_s: f64,
    pub history: Vec<Phase>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub ticks: u64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub warm_resumes: u64,
    pub cold_resumes: u64,
    pub preemptions: u64,
    pub pinned_reclaims: u64,
    pub pin_expiries: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub policy: String,
    pub log: Vec<LogRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub snapshots: Vec<TelemetrySnapshot>,
    pub sessions: Vec<SessionOutcome>,
    pub makespan_s: f64,
    pub stats: SimStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Arrival(usize),
    ToolCheck,
    PinDeadline(SessionId, SimTime),
    ControlTick,
    TickEnd,
}

struct InFlight {
    start: SimTime,
    seq: u64,
    plan: TickPlan,
}

/// Control ticks tolerated with nothing else pending before the run is
/// declared stalled.
const IDLE_LIMIT: u32 = 100_000;

struct Sim<'a> {
    traces: &'a [SessionTrace],
    cfg: &'a SimConfig,
    clock: SimClock<Ev>,
    calls: Vec<Call>,
    index: BTreeMap<SessionId, usize>,
    pool: KvPool,
    tools: ToolPlane,
    tool_requested: Vec<SimTime>,
    telemetry: Telemetry,
    controller: ControllerState,
    queue: Vec<QueueEntry>,
    pinned: PinnedRegistry,
    ready: BTreeSet<usize>,
    log: EventLog,
    decisions: Vec<DecisionRecord>,
    snapshots: Vec<TelemetrySnapshot>,
    in_flight: Option<InFlight>,
    admit_dirty: bool,
    done: usize,
    idle_controls: u32,
    stats: SimStats,
}

pub fn simulate(traces: &[SessionTrace], cfg: &SimConfig) -> Result<SimOutput> {
    cfg.gpu.validate()?;
    cfg.controller.validate()?;
    cfg.pressure.validate()?;
    let need = SimConfig::min_blocks(traces, cfg.block_size);
    if cfg.total_blocks < need {
        return Err(Error::config(
            "engine.total_blocks",
            format!("{} blocks cannot hold the largest session ({need} blocks)", cfg.total_blocks),
        ));
    }
    let mut index = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        if index.insert(t.session_id, i).is_some() {
            return Err(Error::InvalidTrace(format!("duplicate session_id {}", t.session_id)));
        }
    }
    let mut sim = Sim {
        traces,
        cfg,
        clock: SimClock::new(),
        calls: traces
            .iter()
            .map(|t| Call::new(t.session_id, SimTime::from_secs_f64(t.arrival_time), t.rounds.len()))
            .collect(),
        index,
        pool: KvPool::new(cfg.total_blocks, cfg.block_size)?,
        tools: ToolPlane::new(cfg.worker_slots),
        tool_requested: vec![SimTime::ZERO; traces.len()],
        telemetry: Telemetry::new(cfg.total_blocks, cfg.worker_slots.max(1), &cfg.pressure),
        controller: ControllerState::new(&cfg.controller),
        queue: Vec::new(),
        pinned: PinnedRegistry::new(),
        ready: BTreeSet::new(),
        log: EventLog::new(),
        decisions: Vec::new(),
        snapshots: Vec::new(),
        in_flight: None,
        admit_dirty: false,
        done: 0,
        idle_controls: 0,
        stats: SimStats::default(),
    };
    sim.run()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn run(&mut self) -> Result<()> {
        let n = self.traces.len();
        for (i, t) in self.traces.iter().enumerate() {
            self.clock.schedule(SimTime::from_secs_f64(t.arrival_time), Ev::Arrival(i))?;
        }
        if n > 0 {
            self.clock.schedule(self.controller.control_interval, Ev::ControlTick)?;
        }
        while self.done < n {
            let Some((now, ev)) = self.clock.pop() else {
                return Err(Error::Stalled {
                    time: self.clock.now().as_secs_f64(),
                    detail: format!("{} of {n} sessions unfinished with no pending events", n - self.done),
                });
            };
            match ev {
                Ev::Arrival(i) => self.on_arrival(i, now)?,
                Ev::ToolCheck => self.on_tool_check(now)?,
                Ev::PinDeadline(sid, deadline) => self.on_pin_deadline(sid, deadline, now)?,
                Ev::ControlTick => self.on_control_tick(now)?,
                Ev::TickEnd => self.on_tick_end(now)?,
            }
            if self.clock.peek_time() != Some(now) {
                self.settle(now)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> SimOutput {
        let sessions = self
            .calls
            .iter()
            .map(|c| SessionOutcome {
                session_id: c.session_id,
                arrival_s: c.arrival_time.as_secs_f64(),
                admitted_s: c.admitted_at.unwrap_or_default().as_secs_f64(),
                completion_s: c.completion_time.unwrap_or_default().as_secs_f64(),
                history: c.history.clone(),
            })
            .collect();
        SimOutput {
            policy: self.cfg.policy.name().to_string(),
            log: self.log.into_records(),
            decisions: self.decisions,
            snapshots: self.snapshots,
            sessions,
            makespan_s: self.clock.now().as_secs_f64(),
            stats: self.stats,
        }
    }

    fn emit(&mut self, now: SimTime, session: Option<SessionId>, signal: Signal) -> Result<()> {
        let event = TelemetryEvent {
            time: now,
            session_id: session,
            signal,
        };
        record(&event, &mut self.telemetry, &self.cfg.pressure)?;
        self.log.signal(now, session, event.signal);
        Ok(())
    }

    /// Logs pool mutations since the last flush and checks conservation.
    fn flush_pool(&mut self, now: SimTime, reason: impl Fn(bool) -> FreeReason) -> Result<()> {
        for op in self.pool.take_journal() {
            let (sid, body) = match op {
                PoolOp::Alloc { session, blocks } => (session, EngineOp::Alloc { blocks }),
                PoolOp::Free { session, blocks, pinned } => (
                    session,
                    EngineOp::Free {
                        blocks,
                        reason: reason(pinned),
                    },
                ),
                PoolOp::Pin { session, blocks } => (session, EngineOp::Pin { blocks }),
                PoolOp::Unpin { session, blocks } => (session, EngineOp::Unpin { blocks }),
            };
            self.log.engine(now, Some(sid), body);
        }
        if !self.pool.check_conservation() {
            return Err(Error::Invariant {
                invariant: "kv_conservation",
                seq: self.log.next_seq().saturating_sub(1),
                detail: format!("free {} of {} blocks", self.pool.free_blocks(), self.pool.total_blocks()),
            });
        }
        self.telemetry.sync_kv(self.pool.free_blocks());
        Ok(())
    }

    fn settle(&mut self, now: SimTime) -> Result<()> {
        if self.admit_dirty {
            self.admit(now)?;
        }
        if self.in_flight.is_none() {
            self.start_tick(now)?;
        }
        Ok(())
    }

    fn on_arrival(&mut self, i: usize, now: SimTime) -> Result<()> {
        if self.cfg.policy.uses_admission_control() {
            let first = self.traces[i].rounds[0].new_prefill_tokens;
            self.queue.push(QueueEntry::new(
                self.calls[i].session_id,
                first,
                self.cfg.block_size,
                self.cfg.total_blocks,
                self.cfg.controller.long_session_fraction,
                now,
            ));
            self.admit_dirty = true;
            Ok(())
        } else {
            self.admit_session(i, now)
        }
    }

    fn admit(&mut self, now: SimTime) -> Result<()> {
        self.admit_dirty = false;
        self.telemetry.sync_kv(self.pool.free_blocks());
        let adm = balance_and_admit(&mut self.queue, &mut self.controller, &self.telemetry, now, &self.cfg.controller);
        self.emit(now, None, adm.signal)?;
        for e in adm.admitted {
            self.admit_session(self.index[&e.session_id], now)?;
        }
        Ok(())
    }

    fn admit_session(&mut self, i: usize, now: SimTime) -> Result<()> {
        let round = &self.traces[i].rounds[0];
        let mlfq = self.cfg.policy.uses_mlfq();
        let c = &mut self.calls[i];
        c.context_tokens = round.new_prefill_tokens;
        c.remaining_prefill = round.new_prefill_tokens;
        c.remaining_decode = round.decode_tokens;
        c.round_decode_tokens = round.decode_tokens;
        c.enqueue_time = now;
        c.admitted_at = Some(now);
        c.priority = if mlfq {
            PriorityState::new(c.context_tokens, now, &self.cfg.policy.mlfq)
        } else {
            PriorityState {
                wait_since: now,
                ..PriorityState::default()
            }
        };
        c.set_phase(Phase::Prefill);
        self.ready.insert(i);
        let signal = Signal::GpuSubmit {
            round: 0,
            projected_blocks: self.pool.blocks_for(round.new_prefill_tokens + round.decode_tokens),
            prefill_tokens: round.new_prefill_tokens,
            warm: false,
            cause: SubmitCause::Admit,
        };
        let sid = self.calls[i].session_id;
        self.emit(now, Some(sid), signal)
    }

    fn on_control_tick(&mut self, now: SimTime) -> Result<()> {
        self.telemetry.sync_kv(self.pool.free_blocks());
        refresh_pressure(&mut self.telemetry, &self.cfg.pressure);
        self.snapshots.push(TelemetrySnapshot {
            t: now.as_secs_f64(),
            w_adm: self.controller.w_adm,
            telemetry: self.telemetry.clone(),
        });
        if self.cfg.policy.uses_admission_control() {
            self.admit_dirty = true;
        }
        if self.in_flight.is_none() && self.clock.is_empty() {
            self.idle_controls += 1;
            if self.idle_controls > IDLE_LIMIT {
                return Err(Error::Stalled {
                    time: now.as_secs_f64(),
                    detail: format!(
                        "{} ready calls cannot be placed, {} sessions awaiting admission",
                        self.ready.len(),
                        self.queue.len()
                    ),
                });
            }
        } else {
            self.idle_controls = 0;
        }
        self.clock.schedule(now + self.controller.control_interval, Ev::ControlTick)?;
        Ok(())
    }

    fn start_tick(&mut self, now: SimTime) -> Result<()> {
        if self.ready.is_empty() {
            return Ok(());
        }
        let ready: Vec<usize> = self.ready.iter().copied().collect();
        let order = self.cfg.policy.order(&mut self.calls, &ready, now);
        let plan = {
            let mut ctx = PlanContext {
                calls: &mut self.calls,
                index: &self.index,
                pool: &mut self.pool,
                pinned: &mut self.pinned,
                now,
            };
            plan_tick(&mut ctx, &order, &self.cfg.policy.options())?
        };
        self.flush_pool(now, |pinned| if pinned { FreeReason::Reclaim } else { FreeReason::Preempt })?;
        for e in &plan.evictions {
            match e.kind {
                crate::scheduler::EvictionKind::Pinned => self.stats.pinned_reclaims += 1,
                crate::scheduler::EvictionKind::Running => self.stats.preemptions += 1,
            }
        }
        for sid in plan.preempted().collect::<Vec<_>>() {
            let c = &self.calls[self.index[&sid]];
            let signal = Signal::GpuSubmit {
                round: c.round_index,
                projected_blocks: self.pool.blocks_for(c.context_tokens + c.round_decode_tokens),
                prefill_tokens: c.remaining_prefill,
                warm: false,
                cause: SubmitCause::Preempt,
            };
            self.emit(now, Some(sid), signal)?;
        }
        if plan.is_empty() {
            return Ok(());
        }
        self.idle_controls = 0;
        let prefill: Vec<[u64; 2]> = plan.prefill.iter().map(|&(s, g)| [s, g]).collect();
        self.decisions.push(DecisionRecord::TickPlan {
            t: now.as_secs_f64(),
            decodes: plan.decodes.len(),
            prefill: prefill.clone(),
            evictions: plan.evictions.clone(),
            total_tokens: plan.total_tokens,
        });
        let end = now + self.cfg.gpu.tick_duration;
        let seq = self.log.engine(
            now,
            None,
            EngineOp::Tick {
                end_t: end.as_secs_f64(),
                prefill_tokens: plan.prefill.iter().map(|(_, g)| g).sum(),
                decode_tokens: plan.decodes.len() as u64,
                grants: prefill,
                decodes: plan.decodes.clone(),
            },
        );
        self.in_flight = Some(InFlight { start: now, seq, plan });
        self.clock.schedule(end, Ev::TickEnd)?;
        Ok(())
    }

    fn on_tick_end(&mut self, now: SimTime) -> Result<()> {
        let flight = self
            .in_flight
            .take()
            .ok_or_else(|| Error::contract("tick end without a tick in flight"))?;
        let grants: BTreeMap<SessionId, u64> = flight.plan.prefill.iter().copied().collect();
        let decodes: BTreeSet<SessionId> = flight.plan.decodes.iter().copied().collect();
        let mut batch: Vec<BatchItem<'_>> = self
            .calls
            .iter_mut()
            .filter_map(|c| {
                let prefill = grants.get(&c.session_id).copied().unwrap_or(0);
                let decode = decodes.contains(&c.session_id);
                (prefill > 0 || decode).then_some(BatchItem { call: c, prefill, decode })
            })
            .collect();
        let report = step_gpu(flight.start, &self.cfg.gpu, &mut batch).map_err(|e| {
            let detail = e.to_string();
            Error::Invariant {
                invariant: if detail.contains("budget compliance") {
                    "budget_compliance"
                } else {
                    "grant_validity"
                },
                seq: flight.seq,
                detail,
            }
        })?;
        drop(batch);
        self.stats.ticks += 1;
        self.stats.prefill_tokens += report.prefill_tokens;
        self.stats.decode_tokens += report.decode_tokens;
        let mlfq = self.cfg.policy.uses_mlfq();
        for &(sid, tokens) in &report.progress {
            let p = &mut self.calls[self.index[&sid]].priority;
            if mlfq {
                charge_service(p, tokens, &self.cfg.policy.mlfq);
            }
            p.wait_since = now;
        }
        for &(sid, round) in &report.first_tokens {
            let c = &self.calls[self.index[&sid]];
            let delay = now.saturating_sub(c.enqueue_time).as_secs_f64();
            self.emit(
                now,
                Some(sid),
                Signal::GpuFirstToken {
                    round,
                    launch_delay_s: delay,
                },
            )?;
        }
        for sid in report.finished_rounds {
            self.round_end(self.index[&sid], now)?;
        }
        Ok(())
    }

    fn round_end(&mut self, i: usize, now: SimTime) -> Result<()> {
        self.ready.remove(&i);
        let sid = self.calls[i].session_id;
        let round = self.calls[i].round_index;
        let decode = self.calls[i].round_decode_tokens;
        self.calls[i].context_tokens += decode;
        if self.calls[i].is_final_round() {
            let freed = self.pool.free(sid);
            self.flush_pool(now, |_| FreeReason::Complete)?;
            let c = &mut self.calls[i];
            c.set_phase(Phase::Done);
            c.completion_time = Some(now);
            self.done += 1;
            if self.cfg.policy.uses_admission_control() {
                self.admit_dirty = true;
            }
            let signal = Signal::GpuEnd {
                round,
                freed_blocks: freed,
                footprint_blocks: freed,
                final_round: true,
            };
            return self.emit(now, Some(sid), signal);
        }

        let footprint = self.pool.allocated_to(sid);
        self.telemetry.sync_kv(self.pool.free_blocks());
        let input = RetentionInput {
            context_tokens: self.calls[i].context_tokens,
            blocks: footprint,
            total_blocks: self.cfg.total_blocks,
            kv_usage_ratio: self.telemetry.kv_usage_ratio,
            ema_tool_s: self.telemetry.tool_estimate(&self.cfg.pressure),
            prefill_rate: self.cfg.gpu.prefill_rate(),
            now,
        };
        let d = self.cfg.policy.retention_decision(&input);
        self.decisions.push(DecisionRecord::Retention {
            t: now.as_secs_f64(),
            session_id: sid,
            round,
            pin: d.pin,
            benefit_s: d.benefit_s,
            cost_s: d.cost_s,
            deadline_s: d.deadline.map(|t| t.as_secs_f64()),
            ema_tool_s: input.ema_tool_s,
            kv_usage_ratio: input.kv_usage_ratio,
        });
        let freed = if d.pin && footprint > 0 {
            self.pool.pin(sid)?;
            self.pinned.insert(
                sid,
                PinnedSession {
                    session_id: sid,
                    pinned_blocks: footprint,
                    pinned_at: now,
                    predicted_return: now + SimTime::from_secs_f64(input.ema_tool_s),
                    retention_deadline: d.deadline,
                },
            );
            if let Some(deadline) = d.deadline.filter(|_| self.cfg.policy.releases_on_expiry()) {
                self.clock.schedule(deadline, Ev::PinDeadline(sid, deadline))?;
            }
            0
        } else {
            self.pool.free(sid)
        };
        self.flush_pool(now, |_| FreeReason::ToolBoundary)?;
        let next = self.traces[i].rounds[round + 1].new_prefill_tokens;
        let c = &mut self.calls[i];
        c.set_phase(Phase::Tool);
        c.next_round_prefill = Some(next);
        self.emit(
            now,
            Some(sid),
            Signal::GpuEnd {
                round,
                freed_blocks: freed,
                footprint_blocks: footprint,
                final_round: false,
            },
        )?;
        self.controller
            .observe_round_blocks(footprint, self.cfg.controller.block_ema_smoothing);
        let dur_s = self.traces[i].rounds[round].tool_duration.unwrap_or(0.0);
        self.tool_requested[i] = now;
        if let ToolStart::Started { finish } = self.tools.start_tool(now, sid, SimTime::from_secs_f64(dur_s)) {
            self.emit(
                now,
                Some(sid),
                Signal::ToolStart {
                    duration_s: (finish - now).as_secs_f64(),
                    waited_s: 0.0,
                },
            )?;
            self.clock.schedule(finish, Ev::ToolCheck)?;
        }
        self.emit_tool_num(now)
    }

    fn emit_tool_num(&mut self, now: SimTime) -> Result<()> {
        let signal = Signal::ToolNum {
            active: self.tools.active(),
            queued: self.tools.queued(),
        };
        self.emit(now, None, signal)
    }

    fn on_tool_check(&mut self, now: SimTime) -> Result<()> {
        let upd = self.tools.complete_tools(now);
        if upd.finished.is_empty() && upd.started.is_empty() {
            return Ok(());
        }
        for t in &upd.finished {
            let signal = Signal::ToolEnd {
                duration_s: (t.finish - t.started).as_secs_f64(),
            };
            self.emit(now, Some(t.session), signal)?;
            self.resume(self.index[&t.session], now)?;
        }
        for t in &upd.started {
            let i = self.index[&t.session];
            let signal = Signal::ToolStart {
                duration_s: (t.finish - t.started).as_secs_f64(),
                waited_s: now.saturating_sub(self.tool_requested[i]).as_secs_f64(),
            };
            self.emit(now, Some(t.session), signal)?;
            self.clock.schedule(t.finish, Ev::ToolCheck)?;
        }
        self.emit_tool_num(now)
    }

    fn resume(&mut self, i: usize, now: SimTime) -> Result<()> {
        let sid = self.calls[i].session_id;
        self.calls[i].set_phase(Phase::WaitingResume);
        let warm = self.pinned.remove(&sid).is_some();
        if warm {
            self.pool.unpin(sid)?;
            self.flush_pool(now, |_| FreeReason::Reclaim)?;
            self.stats.warm_resumes += 1;
        } else {
            self.stats.cold_resumes += 1;
        }
        let cost = resume_cost(&self.calls[i], warm)?;
        let c = &mut self.calls[i];
        let new = c.next_round_prefill.take().unwrap_or(0);
        c.round_index += 1;
        c.context_tokens += new;
        c.remaining_prefill = cost;
        if !warm {
            c.kv_tokens = 0;
        }
        let spec = &self.traces[i].rounds[c.round_index];
        c.remaining_decode = spec.decode_tokens;
        c.round_decode_tokens = spec.decode_tokens;
        c.warm = warm;
        c.enqueue_time = now;
        c.priority.wait_since = now;
        c.set_phase(Phase::Prefill);
        self.ready.insert(i);
        let signal = Signal::GpuSubmit {
            round: c.round_index,
            projected_blocks: self.pool.blocks_for(c.context_tokens + c.round_decode_tokens),
            prefill_tokens: cost,
            warm,
            cause: SubmitCause::Resume,
        };
        self.emit(now, Some(sid), signal)
    }

    fn on_pin_deadline(&mut self, sid: SessionId, deadline: SimTime, now: SimTime) -> Result<()> {
        let live = self
            .pinned
            .get(&sid)
            .is_some_and(|p| p.retention_deadline == Some(deadline));
        if live {
            self.pinned.remove(&sid);
            self.pool.free(sid);
            self.stats.pin_expiries += 1;
            self.flush_pool(now, |_| FreeReason::PinExpired)?;
        }
        Ok(())
    }
}
