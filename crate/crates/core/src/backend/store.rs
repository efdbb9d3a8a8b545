//! Versioned cells and the undo log.
//!
//! Every piece of backend state (block contents, directory entries, inode
//! metadata) lives in a [`Versioned`] cell holding the current value and the
//! commit timestamp that produced it. When multiversioning is on, each
//! overwrite pushes the displaced value onto the cell's undo chain so that
//! reads at an older timestamp can still be served.

use std::collections::VecDeque;

use crate::model::{BlockRef, FileId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndoEntry<V> {
    pub pre: V,
    pub pre_write_ts: Timestamp,
    pub superseded_by: Timestamp,
}

#[derive(Debug, Clone)]
pub struct Versioned<V> {
    value: V,
    write_ts: Timestamp,
    undo: VecDeque<UndoEntry<V>>,
}

impl<V: Clone> Versioned<V> {
    pub fn new(value: V, write_ts: Timestamp) -> Self {
        Versioned {
            value,
            write_ts,
            undo: VecDeque::new(),
        }
    }

    pub fn current(&self) -> &V {
        &self.value
    }

    pub fn write_ts(&self) -> Timestamp {
        self.write_ts
    }

    pub fn undo_len(&self) -> usize {
        self.undo.len()
    }

    /// The version visible at `ts`, with the timestamp that wrote it.
    /// `None` when that version is not retained.
    pub fn at(&self, ts: Timestamp) -> Option<(&V, Timestamp)> {
        if self.write_ts <= ts {
            return Some((&self.value, self.write_ts));
        }
        // Chain is contiguous: each entry's superseded_by is the next
        // entry's pre_write_ts (or the current write_ts).
        self.undo
            .iter()
            .rev()
            .find(|e| e.pre_write_ts <= ts)
            .map(|e| (&e.pre, e.pre_write_ts))
    }

    /// Installs `value` at `ts`. Returns true when an undo entry was pushed.
    pub fn set(&mut self, value: V, ts: Timestamp, keep_undo: bool) -> bool {
        debug_assert!(ts > self.write_ts, "versions must advance");
        let pre = std::mem::replace(&mut self.value, value);
        let pre_write_ts = std::mem::replace(&mut self.write_ts, ts);
        if keep_undo {
            self.undo.push_back(UndoEntry {
                pre,
                pre_write_ts,
                superseded_by: ts,
            });
        }
        keep_undo
    }

    /// Drops the oldest undo entry; it must have been superseded at `ts`.
    fn prune_oldest(&mut self, ts: Timestamp) -> bool {
        match self.undo.front() {
            Some(e) if e.superseded_by == ts => {
                self.undo.pop_front();
                true
            }
            _ => false,
        }
    }
}

impl<V: Clone> Versioned<Option<V>> {
    /// A cell whose current value is a tombstone and that retains no
    /// history can be removed from its map.
    pub fn is_dead(&self) -> bool {
        self.value.is_none() && self.undo.is_empty()
    }
}

/// Identifies a versioned cell for undo garbage collection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CellKey {
    Block(BlockRef),
    Entry(FileId, String),
    Inode(FileId),
}

/// Global FIFO of undo entries in commit order, so pruning to a retention
/// point never scans cells that have nothing to drop.
#[derive(Debug, Default, Clone)]
pub struct UndoLog {
    queue: VecDeque<(Timestamp, CellKey)>,
}

impl UndoLog {
    pub fn record(&mut self, superseded_by: Timestamp, key: CellKey) {
        debug_assert!(self.queue.back().is_none_or(|(t, _)| *t <= superseded_by));
        self.queue.push_back((superseded_by, key));
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Removes every queued key whose entry was superseded at or before
    /// `retain_after`; `prune` is invoked once per key.
    pub fn drain_upto(
        &mut self,
        retain_after: Timestamp,
        mut prune: impl FnMut(Timestamp, &CellKey) -> bool,
    ) -> usize {
        let mut pruned = 0;
        while let Some((ts, _)) = self.queue.front() {
            if *ts > retain_after {
                break;
            }
            let (ts, key) = self.queue.pop_front().expect("front exists");
            if prune(ts, &key) {
                pruned += 1;
            }
        }
        pruned
    }
}

/// Shared prune step used by the backend when draining the undo log.
pub fn prune_cell<V: Clone>(cell: &mut Versioned<V>, ts: Timestamp) -> bool {
    cell.prune_oldest(ts)
}
