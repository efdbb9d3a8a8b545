//! The monolithic in-memory backend: sequencer, versioned block store, undo
//! log, versioned namespace, optimistic commit validation and the cache
//! update feed.
//!
//! Readers (`get_block`, `get_meta`, `list_dir`, `cache_feed`) share a read
//! lock over the state and never block one another. Commits are serialized:
//! validation and application run in one critical section under the write
//! lock, so a request either applies entirely or leaves no trace.

mod commit;
mod feed;
mod snapshot;
pub mod store;
mod types;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use crate::model::{
    BlockRef, CachePolicy, FileId, FileKind, FileMeta, Timestamp, VersioningMode,
    DEFAULT_BLOCK_SIZE,
};
use crate::path;
use store::{CellKey, UndoLog, Versioned};

pub use snapshot::{Snapshot, SnapshotEntry};
pub use types::{
    AbortReason, BackendError, CacheItem, CacheUpdateBatch, CommitRequest, CommitResult,
    DirEntry, MetaOp, MetaRead, MetaTarget, ReadEntry,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub mode: VersioningMode,
    pub block_size: usize,
    /// Snapshots are retained for this many most recent commit timestamps.
    pub undo_window: u64,
    /// Number of commits kept in the transaction log for cache feeds.
    pub log_window: usize,
    /// Fraction of most-fetched blocks shipped with data by the frequency
    /// policy.
    pub frequency_fraction: f64,
    /// Fetch counters are halved every this many commits.
    pub decay_interval: u64,
    pub max_file_size: Option<u64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: VersioningMode::BlockVersioned,
            block_size: DEFAULT_BLOCK_SIZE,
            undo_window: 1024,
            log_window: 4096,
            frequency_fraction: 0.2,
            decay_interval: 10_000,
            max_file_size: None,
        }
    }
}

impl BackendConfig {
    pub fn with_mode(mode: VersioningMode) -> Self {
        BackendConfig {
            mode,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Inode {
    pub length: u64,
    pub mode: u32,
    pub kind: FileKind,
}

pub(crate) type BlockCell = Versioned<Option<Vec<u8>>>;

#[derive(Debug, Clone)]
pub(crate) struct LogRecord {
    pub ts: Timestamp,
    pub blocks: Vec<BlockRef>,
    pub removed: Vec<FileId>,
}

#[derive(Debug, Clone)]
pub(crate) struct State {
    pub entries: BTreeMap<(FileId, String), Versioned<Option<FileId>>>,
    pub inodes: HashMap<FileId, Versioned<Option<Inode>>>,
    pub blocks: HashMap<FileId, BTreeMap<u64, BlockCell>>,
    /// Last commit touching each file's blocks or length.
    pub file_ts: HashMap<FileId, Timestamp>,
    pub undo: UndoLog,
    pub log: VecDeque<LogRecord>,
    /// The log holds every commit with a timestamp above this.
    pub log_start: Timestamp,
    pub current: Timestamp,
    pub next_file_id: u64,
    pub commits: u64,
}

impl State {
    fn new() -> Self {
        let mut inodes = HashMap::new();
        inodes.insert(
            FileId::ROOT,
            Versioned::new(
                Some(Inode {
                    length: 0,
                    mode: 0o755,
                    kind: FileKind::Directory,
                }),
                Timestamp::GENESIS,
            ),
        );
        State {
            entries: BTreeMap::new(),
            inodes,
            blocks: HashMap::new(),
            file_ts: HashMap::new(),
            undo: UndoLog::default(),
            log: VecDeque::new(),
            log_start: Timestamp::GENESIS,
            current: Timestamp::GENESIS,
            next_file_id: FileId::ROOT.0 + 1,
            commits: 0,
        }
    }

    pub fn block_write_ts(&self, r: BlockRef) -> Timestamp {
        self.blocks
            .get(&r.file)
            .and_then(|m| m.get(&r.block))
            .map_or(Timestamp::GENESIS, |c| c.write_ts())
    }

    fn view(&self, ts: Timestamp) -> View<'_> {
        View { state: self, ts }
    }
}

/// Read access to the state as of one timestamp.
#[derive(Clone, Copy)]
pub(crate) struct View<'s> {
    state: &'s State,
    ts: Timestamp,
}

type ViewResult<T> = Result<T, BackendError>;

impl<'s> View<'s> {
    /// Block contents (`None` for never-written or dropped blocks) and the
    /// timestamp of the version served.
    pub fn block(&self, r: BlockRef) -> ViewResult<(Option<&'s Vec<u8>>, Timestamp)> {
        match self.state.blocks.get(&r.file).and_then(|m| m.get(&r.block)) {
            None => Ok((None, Timestamp::GENESIS)),
            Some(cell) => cell
                .at(self.ts)
                .map(|(v, t)| (v.as_ref(), t))
                .ok_or(BackendError::SnapshotTooOld),
        }
    }

    pub fn inode(&self, id: FileId) -> ViewResult<Option<(&'s Inode, Timestamp)>> {
        match self.state.inodes.get(&id) {
            None => Ok(None),
            Some(cell) => match cell.at(self.ts) {
                Some((Some(inode), t)) => Ok(Some((inode, t))),
                Some((None, _)) => Ok(None),
                None => Err(BackendError::SnapshotTooOld),
            },
        }
    }

    fn lookup(&self, parent: FileId, name: &str) -> ViewResult<Option<FileId>> {
        match self.state.entries.get(&(parent, name.to_string())) {
            None => Ok(None),
            Some(cell) => cell
                .at(self.ts)
                .map(|(v, _)| *v)
                .ok_or(BackendError::SnapshotTooOld),
        }
    }

    pub fn resolve(&self, path_str: &str) -> ViewResult<Option<FileId>> {
        let comps = path::components(path_str).map_err(|e| types::protocol(e.to_string()))?;
        let mut cur = FileId::ROOT;
        for c in comps {
            match self.lookup(cur, c)? {
                Some(id) => cur = id,
                None => return Ok(None),
            }
        }
        Ok(Some(cur))
    }

    pub fn meta(&self, id: FileId) -> ViewResult<Option<FileMeta>> {
        Ok(self.inode(id)?.map(|(inode, t)| FileMeta {
            file: id,
            length: inode.length,
            mode: inode.mode,
            kind: inode.kind,
            meta_version: t,
        }))
    }

    pub fn children(&self, dir: FileId) -> ViewResult<Vec<DirEntry>> {
        let start = (dir, String::new());
        let mut out = Vec::new();
        for ((parent, name), cell) in self.state.entries.range(start..) {
            if *parent != dir {
                break;
            }
            let Some((value, _)) = cell.at(self.ts) else {
                return Err(BackendError::SnapshotTooOld);
            };
            if let Some(id) = value {
                let kind = self
                    .inode(*id)?
                    .map_or(FileKind::Regular, |(inode, _)| inode.kind);
                out.push(DirEntry {
                    name: name.clone(),
                    file: *id,
                    kind,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Default)]
struct FetchStats {
    counts: HashMap<BlockRef, u64>,
}

/// The backend service. Shareable across request handlers via `Arc`.
#[derive(Debug)]
pub struct Backend {
    config: BackendConfig,
    seq: AtomicU64,
    state: RwLock<State>,
    fetches: Mutex<FetchStats>,
    bypass_validation: AtomicBool,
}

impl Backend {
    pub fn new(config: BackendConfig) -> Self {
        assert!(config.block_size >= 1, "block size must be positive");
        Backend {
            config,
            seq: AtomicU64::new(0),
            state: RwLock::new(State::new()),
            fetches: Mutex::new(FetchStats::default()),
            bypass_validation: AtomicBool::new(false),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn mode(&self) -> VersioningMode {
        self.config.mode
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    /// Issues the next commit timestamp.
    pub fn seq_next(&self) -> Timestamp {
        Timestamp(self.seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    /// Timestamp of the latest committed writer, or genesis.
    pub fn current_read_timestamp(&self) -> Timestamp {
        self.state.read().current
    }

    /// Samples a read timestamp and, optionally, the cache feed up to it in
    /// one atomic step.
    pub fn begin(
        &self,
        feed: Option<(Timestamp, CachePolicy)>,
    ) -> (Timestamp, Option<CacheUpdateBatch>) {
        let state = self.state.read();
        let batch = feed.map(|(since, policy)| self.feed_locked(&state, since, policy));
        (state.current, batch)
    }

    fn check_read_ts(state: &State, at: Timestamp) -> Result<(), BackendError> {
        if at > state.current {
            Err(types::protocol(format!(
                "read timestamp {at} is ahead of the latest commit {}",
                state.current
            )))
        } else {
            Ok(())
        }
    }

    /// Block contents as of `at`: the version written by the latest commit
    /// at or before `at`, or zeros with timestamp 0.
    pub fn get_block(
        &self,
        block: BlockRef,
        at: Timestamp,
    ) -> Result<(Vec<u8>, Timestamp), BackendError> {
        let result = {
            let state = self.state.read();
            Self::check_read_ts(&state, at)?;
            let (bytes, ts) = state.view(at).block(block)?;
            let bytes = bytes
                .cloned()
                .unwrap_or_else(|| vec![0; self.config.block_size]);
            (bytes, ts)
        };
        *self.fetches.lock().counts.entry(block).or_insert(0) += 1;
        Ok(result)
    }

    pub fn get_meta(
        &self,
        target: &MetaTarget,
        at: Timestamp,
    ) -> Result<Option<FileMeta>, BackendError> {
        let state = self.state.read();
        Self::check_read_ts(&state, at)?;
        let view = state.view(at);
        let id = match target {
            MetaTarget::Path(p) => match view.resolve(p)? {
                Some(id) => id,
                None => return Ok(None),
            },
            MetaTarget::Id(id) => *id,
        };
        view.meta(id)
    }

    /// Directory entries as of `at`, sorted by name.
    pub fn list_dir(&self, dir: &str, at: Timestamp) -> Result<Vec<DirEntry>, BackendError> {
        let state = self.state.read();
        Self::check_read_ts(&state, at)?;
        let view = state.view(at);
        let id = view.resolve(dir)?.ok_or(BackendError::NotFound)?;
        match view.inode(id)? {
            Some((inode, _)) if inode.kind == FileKind::Directory => view.children(id),
            Some(_) => Err(BackendError::NotADirectory),
            None => Err(BackendError::NotFound),
        }
    }

    /// Validates a transaction's footprint and, if it is still consistent,
    /// applies it atomically under a fresh commit timestamp.
    pub fn validate_and_commit(&self, req: &CommitRequest) -> Result<CommitResult, BackendError> {
        commit::check_well_formed(req, self.config.block_size)?;
        let mut state = self.state.write();
        if req.read_ts > state.current {
            return Err(types::protocol("commit read timestamp is in the future"));
        }
        let bypass = self.bypass_validation.load(Ordering::Relaxed);
        if !bypass {
            if let Err(reason) = commit::validate(&state, req, self.config.mode) {
                return Ok(CommitResult::Aborted(reason));
            }
        }
        if req.is_read_only() {
            return Ok(CommitResult::Committed(req.read_ts));
        }
        let plan = match commit::plan(&state, req, &self.config) {
            Ok(plan) => plan,
            Err(commit::PlanError::Abort(reason)) => return Ok(CommitResult::Aborted(reason)),
            Err(commit::PlanError::Protocol(msg)) => return Err(types::protocol(msg)),
        };
        let ts = self.seq_next();
        commit::install(
            &mut state,
            plan,
            ts,
            self.config.mode.is_multiversioned(),
            self.config.log_window,
        );
        state.commits += 1;
        let commits = state.commits;

        if self.config.undo_window > 0 && ts.0 > self.config.undo_window {
            gc_locked(&mut state, Timestamp(ts.0 - self.config.undo_window));
        }
        if self.config.decay_interval > 0 && commits % self.config.decay_interval == 0 {
            let mut fetches = self.fetches.lock();
            fetches.counts.retain(|_, c| {
                *c /= 2;
                *c > 0
            });
        }
        Ok(CommitResult::Committed(ts))
    }

    pub fn cache_feed(&self, since: Timestamp, policy: CachePolicy) -> CacheUpdateBatch {
        let state = self.state.read();
        self.feed_locked(&state, since, policy)
    }

    fn feed_locked(&self, state: &State, since: Timestamp, policy: CachePolicy) -> CacheUpdateBatch {
        if policy == CachePolicy::Frequency {
            let fetches = self.fetches.lock();
            let threshold = feed::hot_threshold(&fetches.counts, self.config.frequency_fraction);
            return feed::build(state, since, policy, Some((threshold, &fetches.counts)));
        }
        feed::build(state, since, policy, None)
    }

    /// Discards undo entries needed only by snapshots older than
    /// `retain_after`. Returns the number of entries dropped.
    pub fn gc_undo(&self, retain_after: Timestamp) -> usize {
        let mut state = self.state.write();
        let bound = retain_after.min(state.current);
        gc_locked(&mut state, bound)
    }

    pub fn undo_entries(&self) -> usize {
        self.state.read().undo.len()
    }

    /// Deterministic snapshot of the latest committed state.
    pub fn dump(&self, full: bool) -> Snapshot {
        let state = self.state.read();
        snapshot::dump(&state, self.config.block_size, full)
    }

    /// Rebuilds a backend from a full snapshot. History is not retained: all
    /// restored state carries the snapshot's timestamp.
    pub fn restore(config: BackendConfig, snap: &Snapshot) -> Result<Backend, BackendError> {
        let backend = Backend::new(config);
        {
            let mut state = backend.state.write();
            snapshot::restore(&mut state, snap, backend.config.block_size)?;
            backend.seq.store(snap.read_ts.0, Ordering::SeqCst);
        }
        Ok(backend)
    }

    /// Hash over every observable piece of state, including history
    /// retained for snapshots and the transaction log.
    pub fn state_digest(&self) -> String {
        let state = self.state.read();
        let mut h = Sha256::new();
        h.update(state.current.0.to_le_bytes());
        h.update(state.next_file_id.to_le_bytes());
        h.update((state.log.len() as u64).to_le_bytes());
        h.update((state.undo.len() as u64).to_le_bytes());
        for ((parent, name), cell) in &state.entries {
            h.update(format!("e{parent}/{name}={:?}@{}#{}", cell.current(), cell.write_ts(), cell.undo_len()));
        }
        let mut inodes: Vec<_> = state.inodes.iter().collect();
        inodes.sort_by_key(|(id, _)| **id);
        for (id, cell) in inodes {
            h.update(format!("i{id}={:?}@{}#{}", cell.current(), cell.write_ts(), cell.undo_len()));
        }
        let mut files: Vec<_> = state.blocks.iter().collect();
        files.sort_by_key(|(id, _)| **id);
        for (id, blocks) in files {
            for (n, cell) in blocks {
                h.update(format!("b{id}:{n}@{}#{}", cell.write_ts(), cell.undo_len()));
                if let Some(bytes) = cell.current() {
                    h.update(bytes);
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Test hook: accept every commit without validation. Exists only to
    /// manufacture non-serializable histories for checker tests.
    #[doc(hidden)]
    pub fn set_validation_bypass(&self, on: bool) {
        self.bypass_validation.store(on, Ordering::Relaxed);
    }
}

fn gc_locked(state: &mut State, retain_after: Timestamp) -> usize {
    let State {
        undo,
        entries,
        inodes,
        blocks,
        ..
    } = state;
    undo.drain_upto(retain_after, |ts, key| match key {
        CellKey::Block(r) => blocks
            .get_mut(&r.file)
            .and_then(|m| m.get_mut(&r.block))
            .is_some_and(|c| store::prune_cell(c, ts)),
        CellKey::Entry(parent, name) => entries
            .get_mut(&(*parent, name.clone()))
            .is_some_and(|c| store::prune_cell(c, ts)),
        CellKey::Inode(id) => inodes
            .get_mut(id)
            .is_some_and(|c| store::prune_cell(c, ts)),
    })
}
