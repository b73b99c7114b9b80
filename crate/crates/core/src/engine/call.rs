use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::PriorityState;
use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WaitingAdmission,
    Prefill,
    Decode,
    Tool,
    WaitingResume,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::WaitingAdmission => "waiting_admission",
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
            Phase::Tool => "tool",
            Phase::WaitingResume => "waiting_resume",
            Phase::Done => "done",
        }
    }
}

/// The in-flight state of one session. A single `Call` is carried through
/// every round of its session; `round_index` names the current round.
#[derive(Debug, Clone)]
pub struct Call {
    pub session_id: SessionId,
    pub arrival_time: SimTime,
    pub round_index: usize,
    pub rounds: usize,
    pub phase: Phase,
    pub remaining_prefill: u64,
    pub remaining_decode: u64,
    /// Decode length of the current round.
    pub round_decode_tokens: u64,
    /// Full prefix length, including this round's new tokens once submitted.
    pub context_tokens: u64,
    /// Tokens currently materialized in KV.
    pub kv_tokens: u64,
    /// Cumulative GPU service over all rounds.
    pub served_tokens: u64,
    /// Submission time of the current round.
    pub enqueue_time: SimTime,
    pub admitted_at: Option<SimTime>,
    pub first_token_time: Option<SimTime>,
    pub completion_time: Option<SimTime>,
    /// Whether the current submission resumed with resident KV.
    pub warm: bool,
    /// New tokens the next round will append; set while in a tool phase.
    pub next_round_prefill: Option<u64>,
    pub priority: PriorityState,
    pub history: Vec<Phase>,
}

impl Call {
    pub fn new(session_id: SessionId, arrival_time: SimTime, rounds: usize) -> Self {
        Self {
            session_id,
            arrival_time,
            round_index: 0,
            rounds,
            phase: Phase::WaitingAdmission,
            remaining_prefill: 0,
            remaining_decode: 0,
            round_decode_tokens: 0,
            context_tokens: 0,
            kv_tokens: 0,
            served_tokens: 0,
            enqueue_time: arrival_time,
            admitted_at: None,
            first_token_time: None,
            completion_time: None,
            warm: false,
            next_round_prefill: None,
            priority: PriorityState::default(),
            history: vec![Phase::WaitingAdmission],
        }
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.history.push(phase);
    }

    /// On the GPU side: submitted and not yet finished with this round.
    pub fn is_ready(&self) -> bool {
        matches!(self.phase, Phase::Prefill | Phase::Decode)
    }

    pub fn is_final_round(&self) -> bool {
        self.round_index + 1 == self.rounds
    }

    /// Drops all KV progress and restarts the current round from a cold
    /// prefill. The caller releases the blocks.
    pub fn preempt(&mut self) {
        self.kv_tokens = 0;
        self.remaining_prefill = self.context_tokens;
        self.remaining_decode = self.round_decode_tokens;
        self.warm = false;
        self.set_phase(Phase::Prefill);
    }
}

/// Prefill tokens a resuming call must process: only the newly appended
/// tokens when its KV is still resident, the whole prefix otherwise.
pub fn resume_cost(call: &Call, warm: bool) -> Result<u64> {
    if call.phase != Phase::WaitingResume {
        return Err(Error::contract(format!(
            "resume_cost: session {} is in {}, not waiting_resume",
            call.session_id,
            call.phase.name()
        )));
    }
    let new_tokens = call.next_round_prefill.ok_or_else(|| {
        Error::contract(format!("resume_cost: session {} has no pending round", call.session_id))
    })?;
    Ok(if warm {
        new_tokens
    } else {
        call.context_tokens + new_tokens
    })
}
