//! Strict-serializability checking by serial replay.
//!
//! Committed transactions are replayed one at a time in commit-timestamp
//! order on a byte-level oracle. A writer sees every writer committed
//! before it; a read-only transaction commits at its read timestamp and
//! sees every writer up to and including that timestamp. Each recorded read
//! must match the oracle merged with the transaction's earlier writes, and
//! each shipped length assertion must hold on the oracle. Finally, commit
//! order must respect real time between non-overlapping transactions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::history::{Event, EventKind, History};
use crate::backend::{Snapshot, SnapshotEntry};
use crate::model::{FileId, FileKind, Timestamp};

const ROOT_MODE: u32 = 0o755;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub client: u32,
    pub txn: u64,
    /// Index of the offending event in the history, when there is one.
    pub event: Option<usize>,
    pub message: String,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client {} txn {}", self.client, self.txn)?;
        if let Some(i) = self.event {
            write!(f, " event #{i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Violation(Witness),
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        *self == Verdict::Valid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("malformed history: {0}")]
    MalformedHistory(String),
}

fn malformed(msg: impl Into<String>) -> CheckError {
    CheckError::MalformedHistory(msg.into())
}

#[derive(Debug)]
struct TxnRecord<'h> {
    client: u32,
    txn: u64,
    read_ts: Timestamp,
    begin_ns: u64,
    /// (event index, event) for everything between begin and the outcome.
    ops: Vec<(usize, &'h Event)>,
    /// Commit timestamp and reply time.
    committed: Option<(Timestamp, u64)>,
}

impl TxnRecord<'_> {
    fn is_writer(&self) -> bool {
        self.committed.is_some_and(|(ts, _)| ts != self.read_ts)
    }

    fn witness(&self, event: Option<usize>, message: String) -> Witness {
        Witness {
            client: self.client,
            txn: self.txn,
            event,
            message,
        }
    }
}

/// Splits the history into complete transactions, in order of their first
/// event.
fn parse(h: &History) -> Result<Vec<TxnRecord<'_>>, CheckError> {
    let mut out: Vec<TxnRecord<'_>> = Vec::new();
    let mut open: HashMap<u32, usize> = HashMap::new();
    let mut finished: HashMap<(u32, u64), ()> = HashMap::new();
    for (i, e) in h.events.iter().enumerate() {
        let key = (e.client, e.txn);
        if finished.contains_key(&key) {
            return Err(malformed(format!("event #{i} after client {} txn {} ended", e.client, e.txn)));
        }
        match (&e.kind, open.get(&e.client).copied()) {
            (EventKind::Begin { read_ts }, None) => {
                open.insert(e.client, out.len());
                out.push(TxnRecord {
                    client: e.client,
                    txn: e.txn,
                    read_ts: *read_ts,
                    begin_ns: e.at_ns,
                    ops: Vec::new(),
                    committed: None,
                });
            }
            (EventKind::Begin { .. }, Some(_)) => {
                return Err(malformed(format!(
                    "event #{i}: client {} begins txn {} with another open",
                    e.client, e.txn
                )))
            }
            (_, None) => {
                return Err(malformed(format!(
                    "event #{i}: client {} txn {} has no begin",
                    e.client, e.txn
                )))
            }
            (kind, Some(slot)) => {
                if out[slot].txn != e.txn {
                    return Err(malformed(format!(
                        "event #{i}: client {} interleaves txns {} and {}",
                        e.client, out[slot].txn, e.txn
                    )));
                }
                match kind {
                    EventKind::Commit { commit_ts } => {
                        out[slot].committed = Some((*commit_ts, e.at_ns));
                        open.remove(&e.client);
                        finished.insert(key, ());
                    }
                    EventKind::Abort { .. } => {
                        open.remove(&e.client);
                        finished.insert(key, ());
                    }
                    _ => out[slot].ops.push((i, e)),
                }
            }
        }
    }
    if let Some((client, slot)) = open.into_iter().next() {
        return Err(malformed(format!("client {client} txn {} never finished", out[slot].txn)));
    }
    let mut seen: HashMap<Timestamp, (u32, u64)> = HashMap::new();
    for t in out.iter().filter(|t| t.is_writer()) {
        let (ts, _) = t.committed.expect("writer");
        if let Some((c, x)) = seen.insert(ts, (t.client, t.txn)) {
            return Err(malformed(format!(
                "commit timestamp {ts} used by client {c} txn {x} and client {} txn {}",
                t.client, t.txn
            )));
        }
    }
    Ok(out)
}

fn read_range(content: &[u8], offset: u64, count: u64) -> &[u8] {
    let start = (offset as usize).min(content.len());
    let end = (offset.saturating_add(count) as usize).min(content.len());
    &content[start..end]
}

fn write_range(content: &mut Vec<u8>, offset: u64, bytes: &[u8]) {
    let end = offset as usize + bytes.len();
    if content.len() < end {
        content.resize(end, 0);
    }
    content[offset as usize..end].copy_from_slice(bytes);
}

/// File contents after each committed writer, replayed serially.
struct Oracle {
    files: HashMap<FileId, Vec<u8>>,
    latest: Timestamp,
}

impl Oracle {
    fn content(&self, f: FileId) -> &[u8] {
        self.files.get(&f).map_or(&[], |v| v.as_slice())
    }

    /// Replays one transaction, checking its reads and assertions.
    fn apply(&mut self, t: &TxnRecord<'_>) -> Result<(), Witness> {
        let mut view: HashMap<FileId, Vec<u8>> = HashMap::new();
        for (i, e) in &t.ops {
            match &e.kind {
                EventKind::Read {
                    file,
                    offset,
                    count,
                    bytes,
                } => {
                    let current = view.get(file).map_or(self.content(*file), |v| v.as_slice());
                    let expected = read_range(current, *offset, *count);
                    if expected != bytes.as_slice() {
                        return Err(t.witness(
                            Some(*i),
                            format!(
                                "read of file {file} [{offset}, +{count}) returned {} bytes {}, serial replay gives {} bytes {}",
                                bytes.len(),
                                preview(bytes),
                                expected.len(),
                                preview(expected)
                            ),
                        ));
                    }
                }
                EventKind::Write { file, offset, bytes } => {
                    let v = view.entry(*file).or_insert_with(|| self.content(*file).to_vec());
                    write_range(v, *offset, bytes);
                }
                EventKind::Resize { file, length } => {
                    let v = view.entry(*file).or_insert_with(|| self.content(*file).to_vec());
                    v.resize(*length as usize, 0);
                }
                EventKind::Assert { assertion } => {
                    let actual = self.content(assertion.file).len() as u64;
                    if !assertion.holds(actual) {
                        return Err(t.witness(
                            Some(*i),
                            format!(
                                "assertion {:?} {} on file {} fails: serial length is {actual}",
                                assertion.kind, assertion.length, assertion.file
                            ),
                        ));
                    }
                }
                EventKind::Begin { .. } | EventKind::Commit { .. } | EventKind::Abort { .. } => {}
            }
        }
        if t.is_writer() {
            self.files.extend(view);
            self.latest = self.latest.max(t.committed.expect("writer").0);
        } else if !view.is_empty() {
            return Err(t.witness(None, "transaction wrote but committed without a new timestamp".into()));
        }
        Ok(())
    }
}

fn preview(bytes: &[u8]) -> String {
    const MAX: usize = 12;
    let shown = hex::encode(&bytes[..bytes.len().min(MAX)]);
    if bytes.len() > MAX {
        format!("{shown}..")
    } else {
        shown
    }
}

/// Committed transactions in serialization order.
fn serial_order<'a, 'h>(txns: &'a [TxnRecord<'h>]) -> Vec<&'a TxnRecord<'h>> {
    let mut committed: Vec<&TxnRecord<'_>> = txns.iter().filter(|t| t.committed.is_some()).collect();
    committed.sort_by_key(|t| (t.committed.expect("committed").0, !t.is_writer()));
    committed
}

fn replay(txns: &[TxnRecord<'_>]) -> (Oracle, Option<Witness>) {
    let mut oracle = Oracle {
        files: HashMap::new(),
        latest: Timestamp::GENESIS,
    };
    for t in serial_order(txns) {
        let (ts, _) = t.committed.expect("committed");
        if ts < t.read_ts {
            return (oracle, Some(t.witness(None, format!("commit timestamp {ts} precedes read timestamp {}", t.read_ts))));
        }
        if let Err(w) = oracle.apply(t) {
            return (oracle, Some(w));
        }
    }
    (oracle, None)
}

/// If T1's commit returned before T2 began, T2 must see T1.
fn real_time_violation(txns: &[TxnRecord<'_>]) -> Option<Witness> {
    let mut ends: Vec<(u64, Timestamp, &TxnRecord<'_>)> = txns
        .iter()
        .filter_map(|t| t.committed.map(|(ts, end)| (end, ts, t)))
        .collect();
    ends.sort_by_key(|(end, _, _)| *end);
    let mut starts: Vec<&TxnRecord<'_>> = txns.iter().filter(|t| t.committed.is_some()).collect();
    starts.sort_by_key(|t| t.begin_ns);
    let mut best: Option<(Timestamp, &TxnRecord<'_>)> = None;
    let mut j = 0;
    for t2 in starts {
        while j < ends.len() && ends[j].0 < t2.begin_ns {
            if best.is_none_or(|(ts, _)| ends[j].1 > ts) {
                best = Some((ends[j].1, ends[j].2));
            }
            j += 1;
        }
        if let Some((ts, t1)) = best {
            if ts > t2.read_ts {
                return Some(t2.witness(
                    None,
                    format!(
                        "began after client {} txn {} committed at {ts}, yet reads at {}",
                        t1.client, t1.txn, t2.read_ts
                    ),
                ));
            }
        }
    }
    None
}

pub fn check_strict_serializability(h: &History) -> Result<Verdict, CheckError> {
    let txns = parse(h)?;
    if let (_, Some(w)) = replay(&txns) {
        return Ok(Verdict::Violation(w));
    }
    Ok(real_time_violation(&txns).map_or(Verdict::Valid, Verdict::Violation))
}

/// The final state produced by replaying the committed writers serially,
/// as a snapshot comparable with a backend dump. Fails if the history does
/// not replay cleanly.
pub fn replay_oracle(h: &History, full: bool) -> Result<Snapshot, CheckError> {
    let txns = parse(h)?;
    let (oracle, violation) = replay(&txns);
    if let Some(w) = violation {
        return Err(malformed(format!("history does not replay: {w}")));
    }
    let mut entries: BTreeMap<String, SnapshotEntry> = BTreeMap::new();
    entries.insert(
        "/".into(),
        SnapshotEntry::new("/".into(), FileKind::Directory, ROOT_MODE, &[], h.block_size, full),
    );
    for f in &h.files {
        let content = match f.kind {
            FileKind::Regular => oracle.content(f.file),
            FileKind::Directory => &[],
        };
        entries.insert(
            f.path.clone(),
            SnapshotEntry::new(f.path.clone(), f.kind, f.mode, content, h.block_size, full),
        );
    }
    Ok(Snapshot {
        read_ts: oracle.latest,
        block_size: h.block_size,
        entries: entries.into_values().collect(),
    })
}
