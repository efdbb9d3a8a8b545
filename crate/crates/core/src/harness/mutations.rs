//! Histories the checker must reject.
//!
//! Most fixtures take a valid contended history and corrupt it in a way
//! that provably breaks serial equivalence (a read value flipped, a write
//! lost, two commit timestamps swapped, a real-time edge inverted). Three
//! are genuine: they come from backends with commit validation switched
//! off, so stale reads and failed length assertions really commit.

use std::sync::Arc;

use super::history::{EventKind, History, SETUP_CLIENT};
use super::{run_workload_on, Scheduler, WorkloadConfig};
use crate::backend::{Backend, CommitResult};
use crate::client::{Mount, MountConfig, OpenFlags, Whence};
use crate::model::{AssertionKind, CachePolicy, FileKind, Timestamp, VersioningMode};
use crate::wire::transport::{Embedded, Transport};

use super::history::TrackedFile;

#[derive(Debug, Clone)]
struct TxnInfo {
    client: u32,
    read_ts: Timestamp,
    begin: usize,
    end: usize,
    commit: Option<Timestamp>,
    abort: Option<String>,
    reads: Vec<usize>,
    writes: Vec<usize>,
    asserts: Vec<usize>,
}

impl TxnInfo {
    fn is_writer(&self) -> bool {
        self.commit.is_some_and(|ts| ts != self.read_ts)
    }

    fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.begin)
            .chain(self.reads.iter().copied())
            .chain(self.writes.iter().copied())
            .chain(self.asserts.iter().copied())
            .chain(std::iter::once(self.end))
    }
}

fn txns(h: &History) -> Vec<TxnInfo> {
    let mut out: Vec<TxnInfo> = Vec::new();
    let mut open = std::collections::HashMap::new();
    for (i, e) in h.events.iter().enumerate() {
        match &e.kind {
            EventKind::Begin { read_ts } => {
                open.insert((e.client, e.txn), out.len());
                out.push(TxnInfo {
                    client: e.client,
                    read_ts: *read_ts,
                    begin: i,
                    end: i,
                    commit: None,
                    abort: None,
                    reads: Vec::new(),
                    writes: Vec::new(),
                    asserts: Vec::new(),
                });
            }
            kind => {
                let t = &mut out[open[&(e.client, e.txn)]];
                match kind {
                    EventKind::Read { .. } => t.reads.push(i),
                    EventKind::Write { .. } | EventKind::Resize { .. } => t.writes.push(i),
                    EventKind::Assert { .. } => t.asserts.push(i),
                    EventKind::Commit { commit_ts } => {
                        t.commit = Some(*commit_ts);
                        t.end = i;
                    }
                    EventKind::Abort { reason } => {
                        t.abort = Some(reason.clone());
                        t.end = i;
                    }
                    EventKind::Begin { .. } => unreachable!(),
                }
            }
        }
    }
    out
}

fn read_at(h: &History, i: usize) -> (crate::model::FileId, u64, u64, &Vec<u8>) {
    match &h.events[i].kind {
        EventKind::Read {
            file,
            offset,
            count,
            bytes,
        } => (*file, *offset, *count, bytes),
        _ => unreachable!("not a read"),
    }
}

fn bytes_mut(h: &mut History, i: usize) -> &mut Vec<u8> {
    match &mut h.events[i].kind {
        EventKind::Read { bytes, .. } | EventKind::Write { bytes, .. } => bytes,
        _ => unreachable!("no bytes"),
    }
}

fn set_commit(h: &mut History, i: usize, ts: Timestamp) {
    h.events[i].kind = EventKind::Commit { commit_ts: ts };
}

/// Does write event `w` cover the whole range read by event `r`?
fn covers(h: &History, w: usize, r: usize) -> bool {
    let (rf, ro, rc, _) = read_at(h, r);
    match &h.events[w].kind {
        EventKind::Write { file, offset, bytes } => {
            *file == rf && *offset <= ro && offset + bytes.len() as u64 >= ro + rc
        }
        _ => false,
    }
}

/// A committed writer `w2` whose first read was last written, in commit
/// order, by the non-setup writer `w1`. Returns (w1, w2, read index).
fn reads_from(ts: &[TxnInfo], h: &History, nth: usize) -> Option<(usize, usize, usize)> {
    let mut writers: Vec<usize> = (0..ts.len()).filter(|&k| ts[k].is_writer()).collect();
    writers.sort_by_key(|&k| ts[k].commit);
    let mut found = 0;
    for (pos, &k2) in writers.iter().enumerate() {
        let Some(&r) = ts[k2].reads.first() else { continue };
        let last = writers[..pos]
            .iter()
            .rev()
            .find(|&&k1| touches(h, &ts[k1], r));
        if let Some(&k1) = last {
            if ts[k1].client != SETUP_CLIENT && ts[k1].writes.iter().any(|&w| covers(h, w, r)) {
                if found == nth {
                    return Some((k1, k2, r));
                }
                found += 1;
            }
        }
    }
    None
}

/// Did `t` write anything overlapping the range read by event `r`?
fn touches(h: &History, t: &TxnInfo, r: usize) -> bool {
    let (rf, ro, rc, _) = read_at(h, r);
    t.writes.iter().any(|&w| match &h.events[w].kind {
        EventKind::Write { file, offset, bytes } => *file == rf && *offset < ro + rc && offset + bytes.len() as u64 > ro,
        EventKind::Resize { file, .. } => *file == rf,
        _ => false,
    })
}

/// The contended workload the corruptions start from.
pub fn base_config() -> WorkloadConfig {
    WorkloadConfig {
        clients: 8,
        read_only_clients: 2,
        txns: Some(400),
        file_size: 16 * 64,
        block_size: 64,
        hot_block_count: 4,
        hot_probability: 0.8,
        think_time_ms: 0.0,
        mode: VersioningMode::BlockVersioned,
        policy: CachePolicy::InvalidateOnly,
        seed: 20,
        scheduler: Scheduler::Interleaved,
        append_probability: 0.3,
        ..WorkloadConfig::default()
    }
}

fn bypassed_run(config: &WorkloadConfig) -> History {
    let backend = Arc::new(Backend::new(config.backend_config()));
    backend.set_validation_bypass(true);
    let connect = || Ok(Arc::new(Embedded::new(Arc::clone(&backend))) as Arc<dyn Transport>);
    run_workload_on(config, &connect).expect("bypassed run").history
}

/// Two concurrent appends that both commit because validation is off.
fn racing_appends() -> History {
    let backend = Arc::new(Backend::new(crate::backend::BackendConfig {
        block_size: 64,
        ..Default::default()
    }));
    let mount = |_| {
        Mount::new(
            Arc::new(Embedded::new(Arc::clone(&backend))),
            MountConfig {
                block_size: 64,
                ..Default::default()
            },
        )
    };
    let (a, b) = (mount(0), mount(1));
    let mut h = History::new(64);
    let mut t = a.begin().expect("begin");
    h.push(SETUP_CLIENT, 0, 1, EventKind::Begin { read_ts: t.read_ts() });
    let fd = t.open("/log", OpenFlags::WRITE | OpenFlags::CREATE, 0o644).expect("create");
    t.close(fd).expect("close");
    let CommitResult::Committed(ts) = t.commit().expect("commit") else { panic!("setup aborted") };
    h.push(SETUP_CLIENT, 0, 2, EventKind::Commit { commit_ts: ts });

    backend.set_validation_bypass(true);
    let mut t1 = a.begin().expect("begin");
    let mut t2 = b.begin().expect("begin");
    h.push(0, 0, 3, EventKind::Begin { read_ts: t1.read_ts() });
    h.push(1, 0, 4, EventKind::Begin { read_ts: t2.read_ts() });
    let mut file = None;
    for (c, t, rec) in [(0u32, &mut t1, b"first;"), (1, &mut t2, b"second")] {
        let fd = t.open("/log", OpenFlags::WRITE | OpenFlags::APPEND, 0).expect("open");
        let at = t.seek(fd, 0, Whence::End).expect("seek");
        t.write(fd, rec).expect("append");
        let id = t.file_of(fd).expect("fd");
        file = Some(id);
        h.push(c, 0, 5, EventKind::Write { file: id, offset: at, bytes: rec.to_vec() });
    }
    for (c, t, at) in [(0u32, &mut t1, 6), (1, &mut t2, 7)] {
        let (r, req) = t.commit_traced();
        for a in req.expect("sent").assertions {
            h.push(c, 0, at, EventKind::Assert { assertion: a });
        }
        let CommitResult::Committed(ts) = r.expect("commit") else { panic!("bypass still aborted") };
        h.push(c, 0, at, EventKind::Commit { commit_ts: ts });
    }
    h.files.push(TrackedFile {
        path: "/log".into(),
        file: file.expect("opened"),
        kind: FileKind::Regular,
        mode: 0o644,
    });
    h
}

/// Twenty (name, history) pairs, each of which must be judged a violation.
pub fn fixtures() -> Vec<(String, History)> {
    let base = super::run_workload(&base_config()).expect("base run").history;
    let ts = txns(&base);
    let mut out: Vec<(String, History)> = Vec::new();
    let mut add = |name: &str, h: History| out.push((name.to_string(), h));

    let committed_reads: Vec<(usize, usize)> = ts
        .iter()
        .enumerate()
        .filter(|(_, t)| t.commit.is_some())
        .flat_map(|(k, t)| t.reads.iter().map(move |&r| (k, r)))
        .filter(|&(_, r)| !read_at(&base, r).3.is_empty())
        .collect();
    let n = committed_reads.len();
    for (i, &(_, r)) in [0, n / 3, 2 * n / 3, n - 1].iter().map(|&i| &committed_reads[i]).enumerate() {
        let mut h = base.clone();
        bytes_mut(&mut h, r)[0] ^= 0x5a;
        add(&format!("read_byte_flipped_{}", i + 1), h);
    }
    let (_, r) = committed_reads[n / 2];
    let mut h = base.clone();
    bytes_mut(&mut h, r).pop();
    add("read_truncated", h);
    let mut h = base.clone();
    bytes_mut(&mut h, r).push(7);
    add("read_extended", h);
    let &(_, r) = committed_reads
        .iter()
        .find(|&&(_, r)| read_at(&base, r).3.iter().any(|&b| b != 0))
        .expect("nonzero read");
    let mut h = base.clone();
    bytes_mut(&mut h, r).fill(0);
    add("read_zeroed", h);

    // Commit order: w2 read what w1 wrote; swap their timestamps.
    let (k1, k2, r2) = reads_from(&ts, &base, 0).expect("a reads-from pair");
    let mut h = base.clone();
    set_commit(&mut h, ts[k1].end, ts[k2].commit.expect("committed"));
    set_commit(&mut h, ts[k2].end, ts[k1].commit.expect("committed"));
    add("commit_order_swapped", h);

    // Real time: pretend a concurrent writer finished before another began.
    let mut inversions = Vec::new();
    for t1 in ts.iter().filter(|t| t.is_writer() && t.client != SETUP_CLIENT) {
        let w = t1.commit.expect("writer");
        if let Some(t2) = ts.iter().find(|t2| t2.commit.is_some() && t2.read_ts < w && t2.client != t1.client) {
            inversions.push((t1.end, base.events[t2.begin].at_ns));
        }
        if inversions.len() == 2 {
            break;
        }
    }
    for (i, (end, begin_ns)) in inversions.into_iter().enumerate() {
        let mut h = base.clone();
        h.events[end].at_ns = begin_ns.saturating_sub(1);
        add(&format!("real_time_inverted_{}", i + 1), h);
    }

    let w = *ts[k1].writes.iter().find(|&&w| covers(&base, w, r2)).expect("covering write");
    let mut h = base.clone();
    h.events.remove(w);
    add("write_lost", h);
    let mut h = base.clone();
    let (_, ro, _, _) = read_at(&base, r2);
    let rel = match &base.events[w].kind {
        EventKind::Write { offset, .. } => (ro - offset) as usize,
        _ => unreachable!(),
    };
    bytes_mut(&mut h, w)[rel] ^= 0xff;
    add("write_altered", h);

    let mut h = base.clone();
    let drop: Vec<usize> = ts[k1].indices().collect();
    h.events = h
        .events
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, e)| e)
        .collect();
    add("transaction_lost", h);

    // An aborted stale reader reported as committed after everything.
    let max_ts = ts.iter().filter_map(|t| t.commit).max().expect("commits");
    let stale = ts
        .iter()
        .find(|t| t.abort.as_deref() == Some("stale_read") && !t.reads.is_empty())
        .expect("a stale-read abort");
    let mut h = base.clone();
    set_commit(&mut h, stale.end, max_ts.next());
    add("aborted_reported_committed", h);

    add("stale_read_committed", bypassed_run(&WorkloadConfig { seed: 3, ..base_config() }));
    add(
        "lost_update_committed",
        bypassed_run(&WorkloadConfig {
            seed: 4,
            mode: VersioningMode::FileVersioned,
            policy: CachePolicy::Stale,
            read_only_clients: 0,
            append_probability: 0.0,
            ..base_config()
        }),
    );
    add("length_assertion_skipped", racing_appends());

    let a = ts
        .iter()
        .filter(|t| t.commit.is_some())
        .find_map(|t| {
            t.asserts.iter().copied().find(|&a| {
                matches!(&base.events[a].kind, EventKind::Assert { assertion } if assertion.kind != AssertionKind::AtLeast)
            })
        })
        .expect("a committed assertion");
    let mut h = base.clone();
    if let EventKind::Assert { assertion } = &mut h.events[a].kind {
        assertion.kind = AssertionKind::Exactly;
        assertion.length += 1;
    }
    add("assertion_altered", h);

    // A read-only reader moved to just before the writer it read from.
    let ro = ts
        .iter()
        .filter(|t| t.commit.is_some() && !t.is_writer() && t.client != SETUP_CLIENT)
        .find_map(|t| {
            let r = *t.reads.first()?;
            let w = ts
                .iter()
                .filter(|w| w.is_writer() && w.commit <= Some(t.read_ts) && w.client != SETUP_CLIENT)
                .filter(|w| w.writes.iter().any(|&x| covers(&base, x, r)))
                .max_by_key(|w| w.commit)?;
            Some((t.begin, t.end, w.commit.expect("writer")))
        })
        .expect("a read-only reader of a workload write");
    let mut h = base.clone();
    let earlier = Timestamp(ro.2 .0 - 1);
    h.events[ro.0].kind = EventKind::Begin { read_ts: earlier };
    set_commit(&mut h, ro.1, earlier);
    add("read_only_moved_back", h);

    // A writer's read made after an own write that covers it.
    let (r, bytes) = ts
        .iter()
        .filter(|t| t.is_writer() && t.client != SETUP_CLIENT)
        .find_map(|t| {
            let &r = t.reads.first()?;
            let &w = t.writes.first()?;
            let (_, _, count, seen) = read_at(&base, r);
            let bytes = match &base.events[w].kind {
                EventKind::Write { bytes, .. } if bytes.len() as u64 == count && bytes != seen => bytes.clone(),
                _ => return None,
            };
            Some((r, bytes))
        })
        .expect("a writer with a full-block write");
    let mut h = base.clone();
    let (file, offset, _, _) = read_at(&base, r);
    let mut e = base.events[r].clone();
    e.kind = EventKind::Write { file, offset, bytes };
    h.events.insert(r, e);
    add("own_write_ignored", h);

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{check_strict_serializability, Verdict};

    #[test]
    fn every_fixture_is_a_violation() {
        let base = crate::harness::run_workload(&base_config()).unwrap();
        base.verify().unwrap();
        let all = fixtures();
        assert_eq!(all.len(), 20);
        for (name, h) in all {
            match check_strict_serializability(&h) {
                Ok(Verdict::Violation(_)) => {}
                other => panic!("{name}: {other:?}"),
            }
        }
    }
}
