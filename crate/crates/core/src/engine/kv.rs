//! Block-granular KV memory accounting.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::workload::SessionId;

/// A mutation applied to the pool, kept so the simulator can log it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PoolOp {
    Alloc { session: SessionId, blocks: u64 },
    Free { session: SessionId, blocks: u64, pinned: bool },
    Pin { session: SessionId, blocks: u64 },
    Unpin { session: SessionId, blocks: u64 },
}

/// Invariant: `free + Σ allocated + Σ pinned == total`, and a session is in
/// at most one of the two maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvPool {
    total_blocks: u64,
    free_blocks: u64,
    block_size: u64,
    allocated: BTreeMap<SessionId, u64>,
    pinned: BTreeMap<SessionId, u64>,
    journal: Vec<PoolOp>,
}

impl KvPool {
    pub fn new(total_blocks: u64, block_size: u64) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("engine.block_size", "must be >= 1"));
        }
        if total_blocks == 0 {
            return Err(Error::config("engine.total_blocks", "must be >= 1"));
        }
        Ok(Self {
            total_blocks,
            free_blocks: total_blocks,
            block_size,
            allocated: BTreeMap::new(),
            pinned: BTreeMap::new(),
            journal: Vec::new(),
        })
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_blocks
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn allocated(&self) -> &BTreeMap<SessionId, u64> {
        &self.allocated
    }

    pub fn pinned(&self) -> &BTreeMap<SessionId, u64> {
        &self.pinned
    }

    pub fn allocated_to(&self, session: SessionId) -> u64 {
        self.allocated.get(&session).copied().unwrap_or(0)
    }

    pub fn pinned_to(&self, session: SessionId) -> u64 {
        self.pinned.get(&session).copied().unwrap_or(0)
    }

    /// Blocks held by the session, whether running or pinned.
    pub fn held_by(&self, session: SessionId) -> u64 {
        self.allocated_to(session) + self.pinned_to(session)
    }

    pub fn usage_ratio(&self) -> f64 {
        1.0 - self.free_blocks as f64 / self.total_blocks as f64
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    /// Returns `Ok(false)` and leaves the pool untouched when there are not
    /// enough free blocks.
    pub fn allocate(&mut self, session: SessionId, blocks: u64) -> Result<bool> {
        if blocks == 0 {
            return Err(Error::contract("allocate requires blocks >= 1"));
        }
        if self.pinned.contains_key(&session) {
            return Err(Error::contract(format!(
                "allocate for session {session} while its blocks are pinned"
            )));
        }
        if blocks > self.free_blocks {
            return Ok(false);
        }
        self.free_blocks -= blocks;
        *self.allocated.entry(session).or_insert(0) += blocks;
        self.journal.push(PoolOp::Alloc { session, blocks });
        Ok(true)
    }

    /// Releases every block the session holds (allocated or pinned).
    /// Returns the number freed; zero if it held nothing.
    pub fn free(&mut self, session: SessionId) -> u64 {
        if let Some(blocks) = self.allocated.remove(&session) {
            self.free_blocks += blocks;
            self.journal.push(PoolOp::Free {
                session,
                blocks,
                pinned: false,
            });
            blocks
        } else if let Some(blocks) = self.pinned.remove(&session) {
            self.free_blocks += blocks;
            self.journal.push(PoolOp::Free {
                session,
                blocks,
                pinned: true,
            });
            blocks
        } else {
            0
        }
    }

    pub fn pin(&mut self, session: SessionId) -> Result<u64> {
        let blocks = self
            .allocated
            .remove(&session)
            .ok_or_else(|| Error::contract(format!("pin: session {session} holds no allocated blocks")))?;
        self.pinned.insert(session, blocks);
        self.journal.push(PoolOp::Pin { session, blocks });
        Ok(blocks)
    }

    pub fn unpin(&mut self, session: SessionId) -> Result<u64> {
        let blocks = self
            .pinned
            .remove(&session)
            .ok_or_else(|| Error::contract(format!("unpin: session {session} is not pinned")))?;
        self.allocated.insert(session, blocks);
        self.journal.push(PoolOp::Unpin { session, blocks });
        Ok(blocks)
    }

    pub fn check_conservation(&self) -> bool {
        let alloc: u64 = self.allocated.values().sum();
        let pinned: u64 = self.pinned.values().sum();
        let disjoint = self.allocated.keys().all(|k| !self.pinned.contains_key(k));
        disjoint && self.free_blocks + alloc + pinned == self.total_blocks
    }

    pub fn take_journal(&mut self) -> Vec<PoolOp> {
        std::mem::take(&mut self.journal)
    }
}
