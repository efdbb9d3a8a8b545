//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail. Pass `C3` (etc.) to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use txnfs::backend::{AbortReason, Backend, BackendConfig, CommitRequest, CommitResult, MetaOp, MetaTarget, ReadEntry};
use txnfs::client::{FsError, IdempotentOutcome, Mount, MountConfig, OpenFlags};
use txnfs::harness::{mutations, run_workload, run_workload_on, Metrics, Scheduler, WorkloadConfig};
use txnfs::model::{BlockRef, CachePolicy, FileId, Timestamp, VersioningMode, WriteRecord};
use txnfs::wire::transport::{Embedded, Faulty, Recording, Transport};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// C1, C2, C5: the randomized suite, run once and shared.

struct SuiteRun {
    seed: u64,
    config: WorkloadConfig,
    checker: Result<(), String>,
    oracle: Result<(), String>,
    metrics: Metrics,
}

fn suite_config(seed: u64) -> WorkloadConfig {
    let clients = 8 + (seed as usize * 7) % 25;
    WorkloadConfig {
        clients,
        read_only_clients: clients / 4,
        txns: Some(2000),
        file_size: 64 * 256,
        block_size: 256,
        hot_block_count: 8,
        hot_probability: 0.5,
        think_time_ms: 0.0,
        mode: VersioningMode::ALL[seed as usize % 3],
        policy: CachePolicy::ALL[(seed as usize / 3) % 4],
        seed,
        undo_window: 4096,
        scheduler: Scheduler::Interleaved,
        partial_writes: seed % 2 == 0,
        append_probability: 0.1,
        ..WorkloadConfig::default()
    }
}

fn suite() -> &'static Vec<SuiteRun> {
    static RUNS: OnceLock<Vec<SuiteRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..50)
            .map(|seed| {
                let config = suite_config(seed);
                let out = run_workload(&config).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
                let checker = match txnfs::harness::check_strict_serializability(&out.history) {
                    Ok(txnfs::harness::Verdict::Valid) => Ok(()),
                    Ok(txnfs::harness::Verdict::Violation(w)) => Err(w.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                let oracle = match txnfs::harness::replay_oracle(&out.history, false) {
                    Ok(o) if o.digest() == out.dump.digest() => Ok(()),
                    Ok(o) => Err(format!("dump {} != oracle {}", out.dump.digest(), o.digest())),
                    Err(e) => Err(e.to_string()),
                };
                SuiteRun {
                    seed,
                    config,
                    checker,
                    oracle,
                    metrics: out.metrics,
                }
            })
            .collect()
    })
}

fn c1() -> Outcome {
    let t0 = Instant::now();
    let runs = suite();
    let mut combos = std::collections::BTreeSet::new();
    let (mut commits, mut aborts) = (0, 0);
    for r in runs {
        if let Err(w) = &r.checker {
            return Err(format!("seed {}: {w}", r.seed));
        }
        combos.insert((r.config.mode.short_name(), r.config.policy.short_name()));
        commits += r.metrics.commits;
        aborts += r.metrics.aborts;
    }
    ensure(combos.len() == 12, || format!("only {} mode/policy pairs covered", combos.len()))?;
    Ok(format!(
        "{} histories valid, 12 mode/policy pairs, {commits} commits, {aborts} aborts, {:.1}s",
        runs.len(),
        t0.elapsed().as_secs_f64()
    ))
}

fn c2() -> Outcome {
    let runs = suite();
    for r in runs {
        if let Err(e) = &r.oracle {
            return Err(format!("seed {}: {e}", r.seed));
        }
        // Each writer commit advances the read timestamp by one; setup made two.
        let writers = r.metrics.commits - r.metrics.read_only_commits;
        ensure(r.metrics.final_read_ts == 2 + writers, || {
            format!("seed {}: read ts {} but {writers} writer commits", r.seed, r.metrics.final_read_ts)
        })?;
    }
    Ok(format!("{} final dumps match the serial replay digest; read ts = writer commits + setup", runs.len()))
}

fn c5() -> Outcome {
    let mv: Vec<&SuiteRun> = suite()
        .iter()
        .filter(|r| r.config.mode == VersioningMode::BlockMultiversioned)
        .collect();
    let (mut commits, mut aborts) = (0, 0);
    for r in &mv {
        ensure(r.config.undo_window >= r.config.txns.unwrap_or(0) + 2, || "undo window too small".into())?;
        commits += r.metrics.read_only_commits;
        aborts += r.metrics.read_only_aborts;
    }
    ensure(commits > 0, || "no read-only transactions ran".into())?;
    ensure(aborts == 0, || format!("{aborts} read-only aborts"))?;
    Ok(format!("{} multiversioned runs, {commits} read-only commits, 0 aborts", mv.len()))
}

// ---------------------------------------------------------------------------
// C3: commit decisions against a brute-force oracle.

mod exhaustive {
    use super::*;

    pub const BS: usize = 8;
    /// (file index, block) for each item an instance may touch.
    pub const ITEMS: [(usize, u64); 8] = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)];

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Op {
        R(usize),
        W(usize),
    }

    /// Reads that go to the backend: the first read of an item not already
    /// written by the same transaction.
    fn fetches(prog: &[Op]) -> Vec<usize> {
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for op in prog {
            match *op {
                Op::R(i) if !seen.contains(&i) => {
                    seen.push(i);
                    out.push(i);
                }
                Op::W(i) if !seen.contains(&i) => seen.push(i),
                _ => {}
            }
        }
        out
    }

    /// Every merge of the per-client event sequences.
    pub fn interleavings(lens: &[usize], limit: usize, out: &mut Vec<Vec<usize>>) {
        fn go(left: &mut [usize], cur: &mut Vec<usize>, limit: usize, out: &mut Vec<Vec<usize>>) {
            if out.len() >= limit {
                return;
            }
            if left.iter().all(|&n| n == 0) {
                out.push(cur.clone());
                return;
            }
            for c in 0..left.len() {
                if left[c] > 0 {
                    left[c] -= 1;
                    cur.push(c);
                    go(left, cur, limit, out);
                    cur.pop();
                    left[c] += 1;
                }
            }
        }
        go(&mut lens.to_vec(), &mut Vec::new(), limit, out);
    }

    /// `n` uniformly shuffled merges.
    pub fn sampled(lens: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let base: Vec<usize> = lens.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
        (0..n)
            .map(|_| {
                let mut s = base.clone();
                s.shuffle(rng);
                s
            })
            .collect()
    }

    pub fn event_count(prog: &[Op]) -> usize {
        2 + fetches(prog).len()
    }

    /// Naive model: the full version list of every item.
    struct Oracle {
        versions: Vec<Vec<(u64, u64)>>,
        now: u64,
    }

    impl Oracle {
        fn value_at(&self, item: usize, ts: u64) -> u64 {
            self.versions[item].iter().rev().find(|v| v.0 <= ts).map_or(0, |v| v.1)
        }
        fn latest(&self, item: usize) -> u64 {
            self.value_at(item, u64::MAX)
        }
    }

    struct Live {
        read_ts: u64,
        observed: BTreeMap<usize, u64>,
        dead: bool,
        next_fetch: usize,
    }

    fn token_bytes(t: u64) -> Vec<u8> {
        t.to_le_bytes().to_vec()
    }

    fn setup(mode: VersioningMode) -> (Backend, [FileId; 2]) {
        let b = Backend::new(BackendConfig {
            block_size: BS,
            undo_window: 1 << 20,
            ..BackendConfig::with_mode(mode)
        });
        let mut req = CommitRequest::default();
        for (n, path) in ["/f0", "/f1"].iter().enumerate() {
            let file = FileId::provisional(n as u64 + 1);
            req.meta_ops.push(MetaOp::Create {
                path: path.to_string(),
                file,
                mode: 0o644,
            });
            req.meta_ops.push(MetaOp::SetLength {
                file,
                length: 4 * BS as u64,
            });
        }
        assert_eq!(b.validate_and_commit(&req).unwrap(), CommitResult::Committed(Timestamp(1)));
        let id = |p: &str| b.get_meta(&MetaTarget::Path(p.into()), Timestamp(1)).unwrap().unwrap().file;
        let ids = [id("/f0"), id("/f1")];
        (b, ids)
    }

    /// Runs one schedule; returns a description of the first disagreement.
    pub fn run(mode: VersioningMode, progs: &[Vec<Op>], schedule: &[usize]) -> Result<(), String> {
        let (b, ids) = setup(mode);
        let bref = |i: usize| BlockRef::new(ids[ITEMS[i].0], ITEMS[i].1);
        let mut oracle = Oracle {
            versions: vec![Vec::new(); ITEMS.len()],
            now: 1,
        };
        let plan: Vec<Vec<usize>> = progs.iter().map(|p| fetches(p)).collect();
        let mut live: Vec<Option<Live>> = (0..progs.len()).map(|_| None).collect();
        let mut step = vec![0usize; progs.len()];
        let fail = |m: String| Err(format!("{mode} {progs:?} schedule {schedule:?}: {m}"));

        for &c in schedule {
            let s = step[c];
            step[c] += 1;
            if s == 0 {
                let (ts, _) = b.begin(None);
                if ts.0 != oracle.now {
                    return fail(format!("begin at {ts}, oracle at {}", oracle.now));
                }
                live[c] = Some(Live {
                    read_ts: ts.0,
                    observed: BTreeMap::new(),
                    dead: false,
                    next_fetch: 0,
                });
                continue;
            }
            let l = live[c].as_mut().expect("begun");
            if s <= plan[c].len() {
                if l.dead {
                    continue;
                }
                let item = plan[c][l.next_fetch];
                l.next_fetch += 1;
                let overwritten = oracle.versions[item].iter().any(|v| v.0 > l.read_ts);
                let expect = if !mode.is_multiversioned() && overwritten {
                    None
                } else {
                    Some(oracle.value_at(item, l.read_ts))
                };
                let got = match b.get_block(bref(item), Timestamp(l.read_ts)) {
                    Ok((bytes, _)) => Some(u64::from_le_bytes(bytes[..8].try_into().unwrap())),
                    Err(txnfs::backend::BackendError::SnapshotTooOld) => None,
                    Err(e) => return fail(format!("read error {e}")),
                };
                if got != expect {
                    return fail(format!("read of item {item}: backend {got:?}, oracle {expect:?}"));
                }
                match got {
                    Some(v) => {
                        l.observed.insert(item, v);
                    }
                    None => l.dead = true,
                }
                continue;
            }

            // Commit.
            if l.dead {
                continue;
            }
            let mut writes: BTreeMap<usize, u64> = BTreeMap::new();
            for (k, op) in progs[c].iter().enumerate() {
                if let Op::W(i) = *op {
                    writes.insert(i, ((c as u64 + 1) << 32) | (k as u64 + 1));
                }
            }
            let req = CommitRequest {
                read_set: l
                    .observed
                    .keys()
                    .map(|&i| ReadEntry {
                        block: bref(i),
                        ts: Timestamp(l.read_ts),
                    })
                    .collect(),
                write_set: writes.iter().map(|(&i, &t)| WriteRecord::new(bref(i), 0, token_bytes(t))).collect(),
                read_ts: Timestamp(l.read_ts),
                ..CommitRequest::default()
            };
            let got = b.validate_and_commit(&req).map_err(|e| e.to_string());

            // Serializable at the commit point iff everything observed is
            // still current, at the granularity the mode tracks.
            let serializable = if writes.is_empty() && mode.is_multiversioned() {
                true
            } else if mode == VersioningMode::FileVersioned {
                l.observed.keys().all(|&i| {
                    let f = ITEMS[i].0;
                    (0..ITEMS.len())
                        .filter(|&j| ITEMS[j].0 == f)
                        .all(|j| oracle.latest(j) == oracle.value_at(j, l.read_ts))
                })
            } else {
                l.observed.iter().all(|(&i, &v)| oracle.latest(i) == v)
            };
            let expect = if !serializable {
                "abort".to_string()
            } else if writes.is_empty() {
                format!("commit@{}", l.read_ts)
            } else {
                format!("commit@{}", oracle.now + 1)
            };
            let got_s = match &got {
                Ok(CommitResult::Committed(ts)) => format!("commit@{ts}"),
                Ok(CommitResult::Aborted(AbortReason::StaleRead(_))) => "abort".into(),
                other => format!("{other:?}"),
            };
            if got_s != expect {
                return fail(format!("client {c} commit: backend {got_s}, oracle {expect}"));
            }
            if serializable && !writes.is_empty() {
                oracle.now += 1;
                for (&i, &t) in &writes {
                    oracle.versions[i].push((oracle.now, t));
                }
            }
        }

        // Final state equals the oracle's latest versions.
        for i in 0..ITEMS.len() {
            let (bytes, _) = b.get_block(bref(i), b.current_read_timestamp()).map_err(|e| e.to_string())?;
            let v = u64::from_le_bytes(bytes[..8].try_into().unwrap());
            if v != oracle.latest(i) {
                return fail(format!("final item {i}: backend {v}, oracle {}", oracle.latest(i)));
            }
        }
        Ok(())
    }

    /// All programs of `1..=max_ops` operations over `items`.
    pub fn programs(items: &[usize], max_ops: usize) -> Vec<Vec<Op>> {
        let ops: Vec<Op> = items.iter().flat_map(|&i| [Op::R(i), Op::W(i)]).collect();
        let mut out: Vec<Vec<Op>> = Vec::new();
        let mut frontier: Vec<Vec<Op>> = vec![Vec::new()];
        for _ in 0..max_ops {
            frontier = frontier
                .iter()
                .flat_map(|p| {
                    ops.iter().map(move |&o| {
                        let mut q = p.clone();
                        q.push(o);
                        q
                    })
                })
                .collect();
            out.extend(frontier.iter().cloned());
        }
        out
    }
}

fn c3() -> Outcome {
    use exhaustive::*;
    let t0 = Instant::now();
    let (mut schedules, mut instances) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut check = |progs: &[Vec<Op>], sample: bool, rng: &mut ChaCha8Rng| -> Result<usize, String> {
        let lens: Vec<usize> = progs.iter().map(|p| event_count(p)).collect();
        let mut all = Vec::new();
        if sample {
            all = sampled(&lens, 50, rng);
        } else {
            interleavings(&lens, usize::MAX, &mut all);
        }
        instances += 1;
        for s in &all {
            for mode in VersioningMode::ALL {
                run(mode, progs, s)?;
            }
        }
        schedules += all.len();
        Ok(schedules)
    };

    // Two clients, up to two operations over three items on two files:
    // every program pair, every interleaving.
    let two = programs(&[0, 1, 4], 2);
    for a in &two {
        for b in &two {
            check(&[a.clone(), b.clone()], false, &mut rng)?;
        }
    }
    // Three clients, one operation each over two items of one file.
    let one = programs(&[0, 1], 1);
    for a in &one {
        for b in &one {
            for c in &one {
                check(&[a.clone(), b.clone(), c.clone()], false, &mut rng)?;
            }
        }
    }
    // Three clients, up to four operations over two files of four blocks:
    // seeded programs, sampled interleavings.
    let all_ops = programs(&(0..ITEMS.len()).collect::<Vec<_>>(), 1);
    let mut total = 0;
    while total < 100_000 {
        let progs: Vec<Vec<Op>> = (0..3)
            .map(|_| {
                let n = rng.random_range(1..=4);
                (0..n).map(|_| all_ops[rng.random_range(0..all_ops.len())][0]).collect()
            })
            .collect();
        total = check(&progs, true, &mut rng)?;
    }
    Ok(format!(
        "{schedules} schedules x 3 modes over {instances} instances agree, {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// C4: false sharing.

fn c4() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..5 {
        let run = |mode| {
            run_workload(&WorkloadConfig {
                clients: 32,
                duration_secs: 2.0,
                mode,
                seed,
                net_delay_us: 200,
                scheduler: Scheduler::Threads,
                ..WorkloadConfig::default()
            })
            .map_err(|e| e.to_string())
        };
        let fv = run(VersioningMode::FileVersioned)?;
        let bv = run(VersioningMode::BlockVersioned)?;
        for out in [&fv, &bv] {
            out.verify().map_err(|e| format!("seed {seed} {}: {e}", out.metrics.mode))?;
        }
        let (f, b) = (&fv.metrics, &bv.metrics);
        lines.push(format!(
            "seed {seed}: abort file {:.3} block {:.3}, tx/s file {:.0} block {:.0}",
            f.abort_rate, b.abort_rate, f.committed_per_sec, b.committed_per_sec
        ));
        ensure(f.abort_rate > b.abort_rate && b.committed_per_sec > f.committed_per_sec, || lines.join("; "))?;
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// C6: POSIX scripts with two clients.

const BS: usize = 16;
const RW: OpenFlags = OpenFlags::RDWR;

fn two_mounts() -> (Arc<Backend>, Mount, Mount) {
    let b = Arc::new(Backend::new(BackendConfig {
        block_size: BS,
        ..BackendConfig::with_mode(VersioningMode::BlockMultiversioned)
    }));
    let m = || {
        Mount::new(
            Arc::new(Embedded::new(Arc::clone(&b))),
            MountConfig {
                block_size: BS,
                ..MountConfig::default()
            },
        )
    };
    let (x, y) = (m(), m());
    (b, x, y)
}

fn committed(r: Result<CommitResult, FsError>) -> Result<Timestamp, String> {
    match r {
        Ok(CommitResult::Committed(ts)) => Ok(ts),
        other => Err(format!("expected commit, got {other:?}")),
    }
}

fn contents(m: &Mount, p: &str) -> Result<Vec<u8>, String> {
    let mut t = m.begin_read_only().map_err(|e| e.to_string())?;
    let fd = t.open(p, OpenFlags::READ, 0).map_err(|e| e.to_string())?;
    let len = t.fstat(fd).map_err(|e| e.to_string())?.length;
    let out = t.pread(fd, len as usize, 0).map_err(|e| e.to_string())?;
    committed(t.commit())?;
    Ok(out)
}

fn script_zero_fill() -> Result<(), String> {
    let (_, a, b) = two_mounts();
    let mut t = a.begin().map_err(|e| e.to_string())?;
    let fd = t.open("/g", RW | OpenFlags::CREATE, 0o644).map_err(|e| e.to_string())?;
    t.pwrite(fd, b"xy", 40).map_err(|e| e.to_string())?;
    committed(t.commit())?;
    let mut expect = vec![0u8; 40];
    expect.extend_from_slice(b"xy");
    let got = contents(&b, "/g")?;
    ensure(got == expect, || format!("gap read {got:?}"))
}

fn script_truncate() -> Result<(), String> {
    let (_, a, b) = two_mounts();
    let mut t = a.begin().map_err(|e| e.to_string())?;
    let fd = t.open("/t", RW | OpenFlags::CREATE, 0o644).map_err(|e| e.to_string())?;
    t.write(fd, &[b'a'; 40]).map_err(|e| e.to_string())?;
    committed(t.commit())?;
    let mut t = b.begin().map_err(|e| e.to_string())?;
    t.truncate("/t", 5).map_err(|e| e.to_string())?;
    committed(t.commit())?;
    ensure(contents(&a, "/t")? == b"aaaaa", || "shrink".into())?;
    let mut t = a.begin().map_err(|e| e.to_string())?;
    t.truncate("/t", 20).map_err(|e| e.to_string())?;
    committed(t.commit())?;
    let mut expect = b"aaaaa".to_vec();
    expect.resize(20, 0);
    let got = contents(&b, "/t")?;
    ensure(got == expect, || format!("grow exposed {got:?}"))
}

fn script_rename() -> Result<(), String> {
    let (_, a, b) = two_mounts();
    let mut t = a.begin().map_err(|e| e.to_string())?;
    let fd = t.open("/r1", RW | OpenFlags::CREATE, 0o644).map_err(|e| e.to_string())?;
    t.write(fd, b"r").map_err(|e| e.to_string())?;
    committed(t.commit())?;

    let mut reader = b.begin_read_only().map_err(|e| e.to_string())?;
    let mut writer = b.begin().map_err(|e| e.to_string())?;
    let mut t = a.begin().map_err(|e| e.to_string())?;
    t.rename("/r1", "/r2").map_err(|e| e.to_string())?;
    let names = (t.exists("/r1").map_err(|e| e.to_string())?, t.exists("/r2").map_err(|e| e.to_string())?);
    ensure(names == (false, true), || format!("inside rename txn {names:?}"))?;
    committed(t.commit())?;

    // A snapshot from before the rename sees only the old name.
    let names = (reader.exists("/r1").map_err(|e| e.to_string())?, reader.exists("/r2").map_err(|e| e.to_string())?);
    ensure(names == (true, false), || format!("old snapshot {names:?}"))?;
    committed(reader.commit())?;
    // A writer that acted on the old name cannot commit.
    let fd = writer.open("/r1", RW, 0).map_err(|e| e.to_string())?;
    writer.write(fd, b"w").map_err(|e| e.to_string())?;
    match writer.commit() {
        Ok(CommitResult::Aborted(AbortReason::NamespaceConflict(p))) if p == "/r1" => {}
        other => return Err(format!("stale rename writer: {other:?}")),
    }
    let mut t = b.begin_read_only().map_err(|e| e.to_string())?;
    let names = (t.exists("/r1").map_err(|e| e.to_string())?, t.exists("/r2").map_err(|e| e.to_string())?);
    ensure(names == (false, true), || format!("after rename {names:?}"))?;
    ensure(contents(&a, "/r2")? == b"r", || "content moved".into())
}

fn script_create_excl() -> Result<(), String> {
    let (_, a, b) = two_mounts();
    let mut t1 = a.begin().map_err(|e| e.to_string())?;
    let mut t2 = b.begin().map_err(|e| e.to_string())?;
    for (t, who) in [(&mut t1, b"A"), (&mut t2, b"B")] {
        let fd = t
            .open("/x", RW | OpenFlags::CREATE | OpenFlags::EXCL, 0o644)
            .map_err(|e| e.to_string())?;
        t.write(fd, who).map_err(|e| e.to_string())?;
    }
    committed(t1.commit())?;
    match t2.commit() {
        Ok(CommitResult::Aborted(AbortReason::NamespaceConflict(p))) if p == "/x" => {}
        other => return Err(format!("second exclusive create: {other:?}")),
    }
    let mut t3 = b.begin().map_err(|e| e.to_string())?;
    match t3.open("/x", RW | OpenFlags::CREATE | OpenFlags::EXCL, 0o644) {
        Err(FsError::AlreadyExists(_)) => {}
        other => return Err(format!("create after commit: {other:?}")),
    }
    ensure(contents(&b, "/x")? == b"A", || "winner content".into())
}

fn script_append() -> Result<(), String> {
    let (_, a, b) = two_mounts();
    let mut t = a.begin().map_err(|e| e.to_string())?;
    let fd = t.open("/log", RW | OpenFlags::CREATE, 0o644).map_err(|e| e.to_string())?;
    t.write(fd, b"base;").map_err(|e| e.to_string())?;
    committed(t.commit())?;
    let mut t1 = a.begin().map_err(|e| e.to_string())?;
    let mut t2 = b.begin().map_err(|e| e.to_string())?;
    for (t, rec) in [(&mut t1, b"one;"), (&mut t2, b"two;")] {
        let fd = t.open("/log", OpenFlags::WRITE | OpenFlags::APPEND, 0).map_err(|e| e.to_string())?;
        t.write(fd, rec).map_err(|e| e.to_string())?;
    }
    committed(t1.commit())?;
    match t2.commit() {
        Ok(CommitResult::Aborted(AbortReason::LengthViolation(_))) => {}
        other => return Err(format!("concurrent append: {other:?}")),
    }
    let got = contents(&b, "/log")?;
    ensure(got == b"base;one;", || format!("log {:?}", String::from_utf8_lossy(&got)))
}

fn c6() -> Outcome {
    let scripts: [(&str, fn() -> Result<(), String>); 5] = [
        ("zero-fill", script_zero_fill),
        ("truncate", script_truncate),
        ("rename", script_rename),
        ("create-excl", script_create_excl),
        ("eof-append", script_append),
    ];
    for (name, f) in scripts {
        f().map_err(|e| format!("{name}: {e}"))?;
    }
    Ok("zero-fill, truncate, rename, create-excl, eof-append".into())
}

// ---------------------------------------------------------------------------
// C7: byte-range locks never reach the backend.

fn c7() -> Outcome {
    let config = WorkloadConfig {
        clients: 16,
        read_only_clients: 2,
        txns: Some(1000),
        file_size: 32 * 256,
        block_size: 256,
        hot_block_count: 4,
        hot_probability: 0.8,
        think_time_ms: 0.0,
        seed: 7,
        scheduler: Scheduler::Interleaved,
        locks: true,
        ..WorkloadConfig::default()
    };
    let backend = Arc::new(Backend::new(config.backend_config()));
    let log = Recording::new(Arc::new(Embedded::new(Arc::clone(&backend))));
    let connect = || {
        Ok(Arc::new(Recording::sharing(&log, Arc::new(Embedded::new(Arc::clone(&backend))))) as Arc<dyn Transport>)
    };
    let out = run_workload_on(&config, &connect).map_err(|e| e.to_string())?;
    out.verify()?;
    let protocol = ["begin", "get_block", "get_meta", "list_dir", "commit", "feed", "gc", "dump"];
    let kinds = log.kinds();
    if let Some(k) = kinds.iter().find(|k| !protocol.contains(k)) {
        return Err(format!("unexpected request kind {k}"));
    }
    ensure(out.metrics.lock_calls > 0, || "workload took no locks".into())?;
    ensure(out.metrics.aborts > 0, || "workload was not contended".into())?;
    Ok(format!(
        "{} lock calls, {} backend requests, none lock-related; {} aborts; history valid",
        out.metrics.lock_calls,
        kinds.len(),
        out.metrics.aborts
    ))
}

// ---------------------------------------------------------------------------
// C8: exactly-once under injected failures.

fn c8() -> Outcome {
    let backend = Arc::new(Backend::new(BackendConfig {
        block_size: 64,
        ..BackendConfig::with_mode(VersioningMode::BlockMultiversioned)
    }));
    let faulty: Vec<Arc<Faulty>> = (0..2)
        .map(|s| Arc::new(Faulty::new(Arc::new(Embedded::new(Arc::clone(&backend))), 0.3, s)))
        .collect();
    let config = MountConfig {
        block_size: 64,
        retry_limit: 64,
        ..MountConfig::default()
    };
    let mounts: Vec<Mount> = faulty.iter().map(|f| Mount::new(f.clone(), config.clone())).collect();
    let clean = Mount::new(Arc::new(Embedded::new(Arc::clone(&backend))), config.clone());
    let mut t = clean.begin().map_err(|e| e.to_string())?;
    for p in ["/ledger", "/count"] {
        let fd = t.open(p, RW | OpenFlags::CREATE, 0o644).map_err(|e| e.to_string())?;
        t.close(fd).map_err(|e| e.to_string())?;
    }
    committed(t.commit())?;

    let (mut executed, mut skipped) = (0, 0);
    for i in 0..1000 {
        let key = format!("k{i}");
        let record = format!("{key};");
        let out = mounts[i % 2]
            .run_idempotent(&key, |t| {
                let fd = t.open("/ledger", OpenFlags::WRITE | OpenFlags::APPEND, 0)?;
                t.write(fd, record.as_bytes())?;
                let fd = t.open("/count", RW, 0)?;
                let bytes = t.pread(fd, 8, 0)?;
                let n = if bytes.len() == 8 { u64::from_le_bytes(bytes.try_into().unwrap()) } else { 0 };
                t.pwrite(fd, &(n + 1).to_le_bytes(), 0)?;
                Ok(())
            })
            .map_err(|e| format!("{key}: {e}"))?;
        match out {
            IdempotentOutcome::Executed(()) => executed += 1,
            IdempotentOutcome::Skipped => skipped += 1,
        }
    }

    let ledger = String::from_utf8(contents(&clean, "/ledger")?).map_err(|e| e.to_string())?;
    let mut seen: HashMap<&str, u32> = HashMap::new();
    for k in ledger.split(';').filter(|k| !k.is_empty()) {
        *seen.entry(k).or_insert(0) += 1;
    }
    for i in 0..1000 {
        let k = format!("k{i}");
        let n = seen.get(k.as_str()).copied().unwrap_or(0);
        ensure(n == 1, || format!("{k} applied {n} times"))?;
    }
    ensure(seen.len() == 1000, || format!("{} distinct records", seen.len()))?;
    let count = u64::from_le_bytes(contents(&clean, "/count")?.try_into().map_err(|_| "count length".to_string())?);
    ensure(count == 1000, || format!("counter at {count}"))?;
    let mut t = clean.begin_read_only().map_err(|e| e.to_string())?;
    let markers = t.readdir(txnfs::client::MARKER_DIR).map_err(|e| e.to_string())?.len();
    ensure(markers == 1000, || format!("{markers} markers"))?;
    let dropped: u64 = faulty.iter().map(|f| f.dropped_requests()).sum();
    let lost: u64 = faulty.iter().map(|f| f.lost_replies()).sum();
    ensure(dropped > 0 && lost > 0, || "no faults injected".into())?;
    Ok(format!(
        "1000 keys once each; {dropped} dropped requests, {lost} lost replies, {skipped} retries found a marker, {executed} executed"
    ))
}

// ---------------------------------------------------------------------------
// C9: every mutation fixture is rejected by `txnfs check`.

fn c9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = mutations::fixtures();
    ensure(fixtures.len() == 20, || format!("{} fixtures", fixtures.len()))?;
    for (name, h) in &fixtures {
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, h.to_json()).map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_txnfs"))
            .arg("check")
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure(out.status.code() == Some(2), || format!("{name}: exit {:?}", out.status.code()))?;
        ensure(stdout.contains("violation"), || format!("{name}: no witness in {stdout:?}"))?;
    }
    Ok("20/20 fixtures exit 2 with a witness".into())
}

// ---------------------------------------------------------------------------
// C10: single-client smoke throughput.

fn c10() -> Outcome {
    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-smoke");
    let status = Command::new(env!("CARGO_BIN_EXE_txnfs"))
        .args(["bench", "--embedded", "--clients", "1", "--txns", "2000", "--think-time", "0", "--seed", "1"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || format!("bench exit {:?}", status.status.code()))?;
    let text = std::fs::read_to_string(out_dir.join("metrics.json")).map_err(|e| e.to_string())?;
    let m: Metrics = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(m.aborts == 0 && m.commits == 2000, || format!("{} commits, {} aborts", m.commits, m.aborts))?;
    Ok(format!(
        "p50 commit {:.1} us, {:.0} commits/s ({})",
        m.latency.commit.p50_us,
        m.committed_per_sec,
        out_dir.join("metrics.json").display()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("C1", "strict serializability suite", c1),
        ("C2", "oracle equivalence", c2),
        ("C3", "conflict rule vs brute force", c3),
        ("C4", "false sharing ordering", c4),
        ("C5", "read-only immunity", c5),
        ("C6", "POSIX micro-suite", c6),
        ("C7", "lock elision", c7),
        ("C8", "idempotence", c8),
        ("C9", "checker soundness", c9),
        ("C10", "smoke throughput", c10),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == id) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("{id} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
