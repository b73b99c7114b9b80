use serde::{Deserialize, Serialize};

use crate::engine::call::{Call, Phase};
use crate::error::{Error, Result};
use crate::time::SimTime;
use crate::workload::SessionId;

/// Linear token-rate GPU: every tick processes at most
/// `token_budget_per_tick` tokens, prefill and decode alike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuModel {
    pub token_budget_per_tick: u64,
    pub tick_duration: SimTime,
    pub context_limit: u64,
    pub max_decode_slots: usize,
}

impl Default for GpuModel {
    fn default() -> Self {
        GpuModel::from_prefill_rate(512, 8000.0, 262_144, 128)
    }
}

impl GpuModel {
    pub fn from_prefill_rate(budget: u64, tokens_per_sec: f64, context_limit: u64, max_decode_slots: usize) -> Self {
        Self {
            token_budget_per_tick: budget,
            tick_duration: SimTime::from_secs_f64(budget as f64 / tokens_per_sec),
            context_limit,
            max_decode_slots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_budget_per_tick == 0 {
            return Err(Error::config("engine.token_budget_per_tick", "must be >= 1"));
        }
        if self.tick_duration == SimTime::ZERO {
            return Err(Error::config("engine.tick_duration_s", "must be > 0"));
        }
        if self.max_decode_slots == 0 {
            return Err(Error::config("engine.max_decode_slots", "must be >= 1"));
        }
        Ok(())
    }

    /// Prefill throughput in tokens per simulated second.
    pub fn prefill_rate(&self) -> f64 {
        self.token_budget_per_tick as f64 / self.tick_duration.as_secs_f64()
    }
}

pub struct BatchItem<'a> {
    pub call: &'a mut Call,
    pub prefill: u64,
    pub decode: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickReport {
    pub start: SimTime,
    pub end: SimTime,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    /// Calls whose prefill completed this tick, with their round index.
    pub first_tokens: Vec<(SessionId, usize)>,
    /// Calls that emitted the last decode token of their round this tick.
    pub finished_rounds: Vec<SessionId>,
    /// Tokens processed per call.
    pub progress: Vec<(SessionId, u64)>,
}

/// Applies one tick of service. The scheduler owns budget compliance: a
/// batch over budget, or a grant the call cannot consume, is rejected whole.
pub fn step_gpu(start: SimTime, gpu: &GpuModel, batch: &mut [BatchItem<'_>]) -> Result<TickReport> {
    let prefill: u64 = batch.iter().map(|b| b.prefill).sum();
    let decodes = batch.iter().filter(|b| b.decode).count();
    if prefill + decodes as u64 > gpu.token_budget_per_tick {
        return Err(Error::contract(format!(
            "budget compliance: batch needs {} tokens, budget is {}",
            prefill + decodes as u64,
            gpu.token_budget_per_tick
        )));
    }
    if decodes > gpu.max_decode_slots {
        return Err(Error::contract(format!(
            "budget compliance: {decodes} decode slots exceed the limit {}",
            gpu.max_decode_slots
        )));
    }
    for b in batch.iter() {
        let c = &b.call;
        if b.prefill > 0 && (c.phase != Phase::Prefill || b.prefill > c.remaining_prefill) {
            return Err(Error::contract(format!(
                "session {}: prefill grant {} with {} remaining in {}",
                c.session_id,
                b.prefill,
                c.remaining_prefill,
                c.phase.name()
            )));
        }
        if b.decode && (c.phase != Phase::Decode || c.remaining_decode == 0) {
            return Err(Error::contract(format!(
                "session {}: decode slot granted in {}",
                c.session_id,
                c.phase.name()
            )));
        }
        if b.decode && b.prefill > 0 {
            return Err(Error::contract(format!(
                "session {}: both prefill and decode granted",
                c.session_id
            )));
        }
    }

    let end = start + gpu.tick_duration;
    let mut report = TickReport {
        start,
        end,
        prefill_tokens: prefill,
        decode_tokens: decodes as u64,
        ..TickReport::default()
    };
    for b in batch.iter_mut() {
        let call = &mut *b.call;
        if b.prefill > 0 {
            call.remaining_prefill -= b.prefill;
            call.kv_tokens += b.prefill;
            call.served_tokens += b.prefill;
            report.progress.push((call.session_id, b.prefill));
            if call.remaining_prefill == 0 {
                if call.round_index == 0 && call.first_token_time.is_none() {
                    call.first_token_time = Some(end);
                }
                call.set_phase(Phase::Decode);
                report.first_tokens.push((call.session_id, call.round_index));
            }
        } else if b.decode {
            call.remaining_decode -= 1;
            call.kv_tokens += 1;
            call.served_tokens += 1;
            report.progress.push((call.session_id, 1));
            if call.remaining_decode == 0 {
                report.finished_rounds.push(call.session_id);
            }
        }
    }
    Ok(report)
}
