//! The hot-block client loop and the two schedulers that drive it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::history::{Event, EventKind, History, TrackedFile, SETUP_CLIENT};
use super::metrics::{ClientStats, Metrics};
use super::{HarnessError, RunOutput, Scheduler, WorkloadConfig};
use crate::backend::CommitResult;
use crate::client::{Fd, FsError, LockKind, Mount, MountConfig, MountStats, OpenFlags, Txn, Whence};
use crate::model::{FileId, FileKind, Timestamp};
use crate::wire::transport::{BackendApi, Delayed, Recording, Transport};

pub const DATA_PATH: &str = "/bench";
pub const LOG_PATH: &str = "/log";
const FILE_MODE: u32 = 0o644;
/// The log is cut back to empty once it grows past this many blocks.
const LOG_BLOCKS: u64 = 8;

enum Clock {
    Real(Instant),
    /// Each reading advances by one.
    Steps(AtomicU64),
}

impl Clock {
    fn now(&self) -> u64 {
        match self {
            Clock::Real(start) => start.elapsed().as_nanos() as u64,
            Clock::Steps(n) => n.fetch_add(1, Ordering::Relaxed),
        }
    }
}

struct Shared<'a> {
    config: &'a WorkloadConfig,
    clock: Clock,
    data: FileId,
    log: Option<FileId>,
    started: Instant,
}

impl Shared<'_> {
    fn out_of_time(&self) -> bool {
        self.config.txns.is_none() && self.started.elapsed().as_secs_f64() >= self.config.duration_secs
    }
}

struct Choice {
    read: u64,
    write: u64,
    /// (offset in block, bytes)
    data: (usize, Vec<u8>),
    append: Option<Vec<u8>>,
}

enum Phase {
    Idle,
    Begun { txn: Txn, fd: Fd, choice: Choice, begin: Duration, ops_start: Instant },
    Read { txn: Txn, fd: Fd, choice: Choice, begin: Duration, ops_start: Instant },
    Ready { txn: Txn, begin: Duration, ops_start: Instant },
}

struct Client {
    id: u32,
    read_only: bool,
    mount: Mount,
    rng: ChaCha8Rng,
    attempts_left: Option<u64>,
    next_txn: u64,
    phase: Phase,
    events: Vec<Event>,
    stats: ClientStats,
}

impl Client {
    fn record(&mut self, at_ns: u64, kind: EventKind) {
        self.events.push(Event {
            client: self.id,
            txn: self.next_txn,
            at_ns,
            kind,
        });
    }

    fn pick_block(&mut self, cfg: &WorkloadConfig) -> u64 {
        let blocks = cfg.blocks();
        let hot = cfg.hot_block_count;
        if hot > 0 && (hot == blocks || self.rng.random_bool(cfg.hot_probability)) {
            self.rng.random_range(0..hot)
        } else {
            self.rng.random_range(hot..blocks)
        }
    }

    fn choose(&mut self, cfg: &WorkloadConfig) -> Choice {
        let read = self.pick_block(cfg);
        let write = self.pick_block(cfg);
        let bs = cfg.block_size;
        let (off, len) = if cfg.partial_writes {
            let off = self.rng.random_range(0..bs);
            (off, self.rng.random_range(1..=bs - off))
        } else {
            (0, bs)
        };
        let mut bytes = vec![0u8; len];
        self.rng.fill_bytes(&mut bytes);
        let append = (cfg.append_probability > 0.0 && self.rng.random_bool(cfg.append_probability)).then(|| {
            let n = self.rng.random_range(1..=16);
            let mut rec = vec![0u8; n];
            self.rng.fill_bytes(&mut rec);
            rec
        });
        self.stats.choices.push((read, write));
        Choice {
            read,
            write,
            data: (off, bytes),
            append,
        }
    }

    fn read_block(&mut self, sh: &Shared<'_>, txn: &mut Txn, fd: Fd, block: u64) -> Result<(), FsError> {
        let bs = sh.config.block_size as u64;
        let range = block * bs..(block + 1) * bs;
        if sh.config.locks {
            txn.lock(fd, range.clone(), LockKind::Shared)?;
        }
        let bytes = txn.pread(fd, bs as usize, range.start)?;
        self.record(
            sh.clock.now(),
            EventKind::Read {
                file: sh.data,
                offset: range.start,
                count: bs,
                bytes,
            },
        );
        Ok(())
    }

    fn write_block(&mut self, sh: &Shared<'_>, txn: &mut Txn, fd: Fd, choice: &Choice) -> Result<(), FsError> {
        let bs = sh.config.block_size as u64;
        let range = choice.write * bs..(choice.write + 1) * bs;
        if sh.config.locks {
            txn.lock(fd, range.clone(), LockKind::Exclusive)?;
        }
        let offset = range.start + choice.data.0 as u64;
        txn.pwrite(fd, &choice.data.1, offset)?;
        self.record(
            sh.clock.now(),
            EventKind::Write {
                file: sh.data,
                offset,
                bytes: choice.data.1.clone(),
            },
        );
        if sh.config.locks {
            txn.unlock(fd, range)?;
        }
        if let (Some(rec), Some(log)) = (&choice.append, sh.log) {
            let lfd = txn.open(LOG_PATH, OpenFlags::WRITE | OpenFlags::APPEND, 0)?;
            let mut end = txn.seek(lfd, 0, Whence::End)?;
            if end > LOG_BLOCKS * bs {
                txn.ftruncate(lfd, 0)?;
                self.record(sh.clock.now(), EventKind::Resize { file: log, length: 0 });
                end = 0;
            }
            txn.write(lfd, rec)?;
            self.record(
                sh.clock.now(),
                EventKind::Write {
                    file: log,
                    offset: end,
                    bytes: rec.clone(),
                },
            );
            txn.close(lfd)?;
        }
        Ok(())
    }

    fn finish_abort(&mut self, sh: &Shared<'_>, reason: &str) {
        self.record(sh.clock.now(), EventKind::Abort { reason: reason.to_string() });
        self.stats.record_abort(reason);
        self.next_txn += 1;
        self.phase = Phase::Idle;
    }

    /// Runs one operation. Returns false once the client has no more work.
    fn step(&mut self, sh: &Shared<'_>) -> Result<bool, FsError> {
        match std::mem::replace(&mut self.phase, Phase::Idle) {
            Phase::Idle => {
                if self.attempts_left == Some(0) || sh.out_of_time() {
                    return Ok(false);
                }
                if let Some(n) = &mut self.attempts_left {
                    *n -= 1;
                }
                let choice = self.choose(sh.config);
                let at = sh.clock.now();
                let t0 = Instant::now();
                let mut txn = if self.read_only {
                    self.mount.begin_read_only()?
                } else {
                    self.mount.begin()?
                };
                let begin = t0.elapsed();
                self.record(at, EventKind::Begin { read_ts: txn.read_ts() });
                let flags = if self.read_only { OpenFlags::READ } else { OpenFlags::RDWR };
                match txn.open(DATA_PATH, flags, 0) {
                    Ok(fd) => {
                        self.phase = Phase::Begun {
                            txn,
                            fd,
                            choice,
                            begin,
                            ops_start: Instant::now(),
                        }
                    }
                    Err(FsError::Aborted(r)) => self.finish_abort(sh, r.label()),
                    Err(e) => return Err(e),
                }
            }
            Phase::Begun {
                mut txn,
                fd,
                choice,
                begin,
                ops_start,
            } => match self.read_block(sh, &mut txn, fd, choice.read) {
                Ok(()) => {
                    self.phase = Phase::Read {
                        txn,
                        fd,
                        choice,
                        begin,
                        ops_start,
                    }
                }
                Err(FsError::Aborted(r)) => self.finish_abort(sh, r.label()),
                Err(e) => return Err(e),
            },
            Phase::Read {
                mut txn,
                fd,
                choice,
                begin,
                ops_start,
            } => {
                let done = if self.read_only {
                    self.read_block(sh, &mut txn, fd, choice.write)
                } else {
                    self.write_block(sh, &mut txn, fd, &choice)
                };
                match done {
                    Ok(()) => {
                        self.phase = Phase::Ready {
                            txn,
                            begin,
                            ops_start,
                        }
                    }
                    Err(FsError::Aborted(r)) => self.finish_abort(sh, r.label()),
                    Err(e) => return Err(e),
                }
            }
            Phase::Ready {
                mut txn,
                begin,
                ops_start,
            } => {
                let ops = ops_start.elapsed();
                let t0 = Instant::now();
                let (result, req) = txn.commit_traced();
                let commit = t0.elapsed();
                let at = sh.clock.now();
                if let Some(req) = req {
                    for a in req.assertions {
                        self.record(at, EventKind::Assert { assertion: a });
                    }
                }
                self.stats.phase(begin, ops, commit);
                match result? {
                    CommitResult::Committed(ts) => {
                        self.record(at, EventKind::Commit { commit_ts: ts });
                        self.stats.commits += 1;
                        self.next_txn += 1;
                    }
                    CommitResult::Aborted(r) => self.finish_abort(sh, r.label()),
                }
            }
        }
        Ok(true)
    }
}

/// Creates and fills the workload files, recording the setup as history.
fn setup(
    config: &WorkloadConfig,
    mount: &Mount,
    history: &mut History,
    rng: &mut ChaCha8Rng,
) -> Result<(FileId, Option<FileId>), FsError> {
    let mut paths = vec![DATA_PATH];
    if config.append_probability > 0.0 {
        paths.push(LOG_PATH);
    }
    let mut clock = 0u64;
    let mut tick = || {
        clock += 1;
        clock
    };
    // Files first, so their ids are final before any data is written.
    let mut txn = mount.begin()?;
    history.push(SETUP_CLIENT, 0, tick(), EventKind::Begin { read_ts: txn.read_ts() });
    for p in &paths {
        let fd = txn.open(p, OpenFlags::WRITE | OpenFlags::CREATE, FILE_MODE)?;
        txn.close(fd)?;
    }
    let ts = expect_commit(txn.commit()?)?;
    history.push(SETUP_CLIENT, 0, tick(), EventKind::Commit { commit_ts: ts });

    let mut txn = mount.begin()?;
    history.push(SETUP_CLIENT, 1, tick(), EventKind::Begin { read_ts: txn.read_ts() });
    let mut ids = Vec::new();
    for p in &paths {
        let fd = txn.open(p, OpenFlags::RDWR, 0)?;
        let id = txn.file_of(fd)?;
        ids.push(id);
        // A reused backend may hold older content.
        txn.ftruncate(fd, 0)?;
        history.push(SETUP_CLIENT, 1, tick(), EventKind::Resize { file: id, length: 0 });
        if *p == DATA_PATH {
            let mut bytes = vec![0u8; config.file_size as usize];
            rng.fill_bytes(&mut bytes);
            txn.pwrite(fd, &bytes, 0)?;
            history.push(SETUP_CLIENT, 1, tick(), EventKind::Write { file: id, offset: 0, bytes });
        }
        history.files.push(TrackedFile {
            path: p.to_string(),
            file: id,
            kind: FileKind::Regular,
            mode: FILE_MODE,
        });
    }
    let ts = expect_commit(txn.commit()?)?;
    history.push(SETUP_CLIENT, 1, tick(), EventKind::Commit { commit_ts: ts });
    Ok((ids[0], ids.get(1).copied()))
}

fn expect_commit(r: CommitResult) -> Result<Timestamp, FsError> {
    match r {
        CommitResult::Committed(ts) => Ok(ts),
        CommitResult::Aborted(reason) => Err(FsError::Aborted(reason)),
    }
}

fn attempts_for(config: &WorkloadConfig, client: usize) -> Option<u64> {
    config.txns.map(|total| {
        let n = config.clients as u64;
        total / n + u64::from((client as u64) < total % n)
    })
}

pub(super) fn run(
    config: &WorkloadConfig,
    connect: &(dyn Fn() -> Result<Arc<dyn Transport>, HarnessError> + Sync),
) -> Result<RunOutput, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mount_config = MountConfig {
        block_size: config.block_size,
        policy: config.policy,
        ..MountConfig::default()
    };
    let control = connect()?;
    let mut history = History::new(config.block_size);
    let setup_mount = Mount::new(Arc::clone(&control), mount_config.clone());
    let (data, log) = setup(config, &setup_mount, &mut history, &mut rng).map_err(|e| HarnessError::Setup(e.to_string()))?;

    let recording = Arc::new(Recording::new(Arc::clone(&control)));
    let mut clients = Vec::with_capacity(config.clients);
    for c in 0..config.clients {
        let base = if c == 0 { Arc::clone(&control) } else { connect()? };
        let recorded: Arc<dyn Transport> = Arc::new(Recording::sharing(&recording, base));
        let transport: Arc<dyn Transport> = if config.net_delay_us > 0 || config.scheduler == Scheduler::Threads {
            Arc::new(Delayed::new(recorded, Duration::from_micros(config.net_delay_us)))
        } else {
            recorded
        };
        let mut crng = ChaCha8Rng::seed_from_u64(config.seed);
        crng.set_stream(c as u64 + 1);
        let read_only = c >= config.clients - config.read_only_clients;
        clients.push(Client {
            id: c as u32,
            read_only,
            mount: Mount::new(transport, mount_config.clone()),
            rng: crng,
            attempts_left: attempts_for(config, c),
            next_txn: 0,
            phase: Phase::Idle,
            events: Vec::new(),
            stats: ClientStats {
                read_only,
                ..Default::default()
            },
        });
    }

    let shared = Shared {
        config,
        clock: match config.scheduler {
            Scheduler::Threads => Clock::Real(Instant::now()),
            Scheduler::Interleaved => Clock::Steps(AtomicU64::new(1_000)),
        },
        data,
        log,
        started: Instant::now(),
    };
    match config.scheduler {
        Scheduler::Threads => run_threads(&shared, &mut clients)?,
        Scheduler::Interleaved => run_interleaved(&shared, &mut clients, &mut rng)?,
    }
    let elapsed = shared.started.elapsed();

    let stats: Vec<ClientStats> = clients.iter().map(|c| c.stats.clone()).collect();
    let mut metrics = Metrics::merge(&stats, elapsed);
    metrics.mode = config.mode.short_name().into();
    metrics.policy = config.policy.short_name().into();
    metrics.seed = config.seed;
    for c in &clients {
        let s = c.mount.stats();
        metrics.lock_calls += MountStats::get(&s.lock_calls);
        metrics.cache_hits += MountStats::get(&s.cache_hits);
        metrics.backend_fetches += MountStats::get(&s.backend_fetches);
    }
    for kind in recording.kinds() {
        *metrics.transport_calls.entry(kind.to_string()).or_insert(0) += 1;
    }
    for c in clients {
        history.extend(c.events);
    }
    let dump = control.dump(false).map_err(|e| HarnessError::Setup(format!("final dump: {e}")))?;
    metrics.final_read_ts = dump.read_ts.0;
    Ok(RunOutput { metrics, history, dump })
}

fn run_threads(sh: &Shared<'_>, clients: &mut [Client]) -> Result<(), HarnessError> {
    let think = Duration::from_secs_f64(sh.config.think_time_ms / 1000.0);
    std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter_mut()
            .map(|c| {
                s.spawn(move || -> Result<(), HarnessError> {
                    loop {
                        // One whole transaction, then think.
                        loop {
                            let more = c.step(sh).map_err(|error| HarnessError::Client { client: c.id, error })?;
                            if !more {
                                return Ok(());
                            }
                            if matches!(c.phase, Phase::Idle) {
                                break;
                            }
                        }
                        if !think.is_zero() {
                            std::thread::sleep(think);
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect::<Result<(), _>>()
    })
}

fn run_interleaved(sh: &Shared<'_>, clients: &mut [Client], rng: &mut ChaCha8Rng) -> Result<(), HarnessError> {
    let mut live: Vec<usize> = (0..clients.len()).collect();
    while !live.is_empty() {
        let k = rng.random_range(0..live.len());
        let c = &mut clients[live[k]];
        let more = c.step(sh).map_err(|error| HarnessError::Client { client: c.id, error })?;
        if !more {
            live.swap_remove(k);
        }
    }
    Ok(())
}
