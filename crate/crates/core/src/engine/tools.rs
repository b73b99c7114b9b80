//! Slot-limited CPU plane for tool execution. Contention shows up only as
//! FIFO queueing delay.

use std::collections::VecDeque;

use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunningTool {
    pub session: SessionId,
    pub started: SimTime,
    pub finish: SimTime,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedTool {
    pub session: SessionId,
    pub duration: SimTime,
    pub enqueued: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolStart {
    Started { finish: SimTime },
    Queued { position: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolUpdate {
    /// Finished tools, ordered by (finish time, start order).
    pub finished: Vec<RunningTool>,
    /// Queued tools promoted into freed slots, in FIFO order.
    pub started: Vec<RunningTool>,
}

#[derive(Debug, Clone)]
pub struct ToolPlane {
    worker_slots: usize,
    running: Vec<RunningTool>,
    queued: VecDeque<QueuedTool>,
    next_seq: u64,
}

impl ToolPlane {
    pub fn new(worker_slots: usize) -> Self {
        Self {
            worker_slots: worker_slots.max(1),
            running: Vec::new(),
            queued: VecDeque::new(),
            next_seq: 0,
        }
    }

    pub fn worker_slots(&self) -> usize {
        self.worker_slots
    }

    pub fn active(&self) -> usize {
        self.running.len()
    }

    pub fn queued(&self) -> usize {
        self.queued.len()
    }

    pub fn running(&self) -> &[RunningTool] {
        &self.running
    }

    fn launch(&mut self, session: SessionId, now: SimTime, duration: SimTime) -> RunningTool {
        let tool = RunningTool {
            session,
            started: now,
            finish: now + duration,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.running.push(tool);
        tool
    }

    pub fn start_tool(&mut self, now: SimTime, session: SessionId, duration: SimTime) -> ToolStart {
        if self.running.len() < self.worker_slots && self.queued.is_empty() {
            let tool = self.launch(session, now, duration);
            ToolStart::Started { finish: tool.finish }
        } else {
            self.queued.push_back(QueuedTool {
                session,
                duration,
                enqueued: now,
            });
            ToolStart::Queued {
                position: self.queued.len() - 1,
            }
        }
    }

    /// Releases every tool finished by `now`, then fills free slots from the
    /// queue in FIFO order starting at `now`.
    pub fn complete_tools(&mut self, now: SimTime) -> ToolUpdate {
        let mut finished: Vec<RunningTool> = Vec::new();
        self.running.retain(|t| {
            if t.finish <= now {
                finished.push(*t);
                false
            } else {
                true
            }
        });
        finished.sort_by_key(|t| (t.finish, t.seq));
        let mut started = Vec::new();
        while self.running.len() < self.worker_slots {
            let Some(q) = self.queued.pop_front() else { break };
            started.push(self.launch(q.session, now, q.duration));
        }
        ToolUpdate { finished, started }
    }

    pub fn next_finish(&self) -> Option<SimTime> {
        self.running.iter().map(|t| t.finish).min()
    }
}
