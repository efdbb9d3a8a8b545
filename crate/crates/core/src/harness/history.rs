//! Recorded transaction histories.
//!
//! Events carry what each client observed (read bytes) and did (writes,
//! resizes, the length assertions it shipped), plus monotonic clock
//! readings around `begin` and `commit` for the real-time check.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{FileId, FileKind, LengthAssertion, Timestamp};

/// Client id used for setup transactions.
pub const SETUP_CLIENT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum EventKind {
    /// `at_ns` on this event is taken just before the begin call.
    Begin { read_ts: Timestamp },
    Read {
        file: FileId,
        offset: u64,
        count: u64,
        #[serde(with = "crate::wire::b64")]
        bytes: Vec<u8>,
    },
    Write {
        file: FileId,
        offset: u64,
        #[serde(with = "crate::wire::b64")]
        bytes: Vec<u8>,
    },
    /// Exact length change (truncate).
    Resize { file: FileId, length: u64 },
    Assert { assertion: LengthAssertion },
    /// `at_ns` on this event is taken just after the reply arrived.
    Commit { commit_ts: Timestamp },
    Abort { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub client: u32,
    pub txn: u64,
    pub at_ns: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// A file the oracle reproduces, by path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedFile {
    pub path: String,
    pub file: FileId,
    pub kind: FileKind,
    pub mode: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub block_size: usize,
    /// Every file in the tree, root excluded.
    pub files: Vec<TrackedFile>,
    pub events: Vec<Event>,
}

impl History {
    pub fn new(block_size: usize) -> Self {
        History {
            block_size,
            ..Default::default()
        }
    }

    pub fn push(&mut self, client: u32, txn: u64, at_ns: u64, kind: EventKind) {
        self.events.push(Event {
            client,
            txn,
            at_ns,
            kind,
        });
    }

    /// Appends another log, keeping each client's order.
    pub fn extend(&mut self, events: impl IntoIterator<Item = Event>) {
        self.events.extend(events);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("history serializes")
    }

    pub fn from_json(s: &str) -> Result<History, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<History, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        History::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Committed and aborted transaction counts.
    pub fn outcomes(&self) -> (usize, usize) {
        let mut c = 0;
        let mut a = 0;
        for e in &self.events {
            match e.kind {
                EventKind::Commit { .. } => c += 1,
                EventKind::Abort { .. } => a += 1,
                _ => {}
            }
        }
        (c, a)
    }

    /// Events grouped per transaction, in first-appearance order.
    pub fn transactions(&self) -> Vec<((u32, u64), Vec<&Event>)> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(u32, u64), Vec<&Event>> = BTreeMap::new();
        for e in &self.events {
            let key = (e.client, e.txn);
            let g = groups.entry(key).or_default();
            if g.is_empty() {
                order.push(key);
            }
            g.push(e);
        }
        order
            .into_iter()
            .map(|k| (k, groups.remove(&k).expect("grouped")))
            .collect()
    }
}
