use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::time::SimTime;

struct Pending<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        other.at.cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

/// Monotone simulated clock with a (time, sequence)-ordered event queue.
pub struct SimClock<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Pending<E>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedules `event` at `at`; scheduling into the past is rejected.
    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<u64> {
        if at < self.now {
            return Err(Error::contract(format!(
                "event scheduled at {at} before current time {}",
                self.now
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending { at, seq, event });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|p| p.at)
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let p = self.queue.pop()?;
        self.now = p.at;
        Some((p.at, p.event))
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn iter_events(&self) -> impl Iterator<Item = &E> {
        self.queue.iter().map(|p| &p.event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_sequence() {
        let mut c = SimClock::new();
        c.schedule(SimTime(5), "b").unwrap();
        c.schedule(SimTime(1), "a").unwrap();
        c.schedule(SimTime(5), "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| c.pop()).map(|(_, e)| e).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert_eq!(c.now(), SimTime(5));
        assert!(c.schedule(SimTime(4), "late").is_err());
    }
}
