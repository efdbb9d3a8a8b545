//! The caching transactional client.
//!
//! A [`Mount`] is one client instance: a connection to the backend plus a
//! block cache that is refreshed only when a transaction begins. Each
//! [`Txn`] reads at a fixed snapshot timestamp, buffers writes locally, and
//! ships its footprint to the backend at commit. Lock calls succeed locally
//! and never reach the backend.

mod idempotent;
mod local;
mod overlay;
mod txn;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::backend::{AbortReason, BackendError, CacheItem, CacheUpdateBatch};
use crate::model::{BlockRef, CachePolicy, Timestamp, DEFAULT_BLOCK_SIZE};
use crate::wire::transport::{BackendApi, CallError, Transport, TransportError};

pub use idempotent::{IdempotentOutcome, MARKER_DIR};
pub use txn::{Fd, Txn, TxnState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("is a directory: {0}")]
    IsADirectory(String),
    #[error("directory not empty: {0}")]
    DirectoryNotEmpty(String),
    #[error("bad file descriptor {0}")]
    BadDescriptor(u32),
    #[error("descriptor {0} is not open for this access")]
    ReadOnlyHandle(u32),
    #[error("transaction was begun read-only")]
    ReadOnlyTransaction,
    #[error("invalid offset")]
    InvalidOffset,
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("transaction aborted: {0}")]
    Aborted(AbortReason),
    #[error("transaction is no longer active")]
    NotActive,
    #[error("transport failure: {0}")]
    Transport(TransportError),
    #[error("commit outcome unknown: {0}")]
    Indeterminate(TransportError),
    #[error("backend rejected request: {0}")]
    Protocol(String),
    #[error("gave up after {0} attempts")]
    RetriesExhausted(usize),
}

impl From<CallError> for FsError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Transport(t) => FsError::Transport(t),
            CallError::Backend(BackendError::SnapshotTooOld) => {
                FsError::Aborted(AbortReason::SnapshotTooOld)
            }
            CallError::Backend(BackendError::Protocol(m)) => FsError::Protocol(m),
            CallError::Backend(other) => FsError::Protocol(other.to_string()),
        }
    }
}

impl From<crate::path::InvalidPath> for FsError {
    fn from(e: crate::path::InvalidPath) -> Self {
        FsError::InvalidPath(e.0)
    }
}

/// Open flags. Combine with `|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpenFlags(u32);

impl OpenFlags {
    pub const READ: OpenFlags = OpenFlags(1);
    pub const WRITE: OpenFlags = OpenFlags(2);
    pub const RDWR: OpenFlags = OpenFlags(3);
    pub const CREATE: OpenFlags = OpenFlags(4);
    pub const EXCL: OpenFlags = OpenFlags(8);
    pub const TRUNC: OpenFlags = OpenFlags(16);
    pub const APPEND: OpenFlags = OpenFlags(32);

    pub fn contains(self, other: OpenFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn readable(self) -> bool {
        self.contains(Self::READ)
    }

    /// Append implies write access.
    pub fn writable(self) -> bool {
        self.contains(Self::WRITE) || self.contains(Self::APPEND)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn from_bits(bits: u32) -> OpenFlags {
        OpenFlags(bits & 63)
    }
}

impl std::ops::BitOr for OpenFlags {
    type Output = OpenFlags;
    fn bitor(self, rhs: OpenFlags) -> OpenFlags {
        OpenFlags(self.0 | rhs.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Whence {
    Set,
    Cur,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockKind {
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MountConfig {
    pub block_size: usize,
    pub policy: CachePolicy,
    /// Install a committed transaction's blocks into the cache.
    pub fold_in: bool,
    /// Attempts made by [`Mount::run_idempotent`].
    pub retry_limit: usize,
}

impl Default for MountConfig {
    fn default() -> Self {
        MountConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            policy: CachePolicy::InvalidateOnly,
            fold_in: true,
            retry_limit: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CacheEntry {
    pub bytes: Arc<Vec<u8>>,
    pub write_ts: Timestamp,
    /// The version was known current through this time.
    pub valid_upto: Timestamp,
}

#[derive(Debug, Default)]
pub(crate) struct Cache {
    pub blocks: HashMap<BlockRef, CacheEntry>,
    /// Feeds have been applied through this time.
    pub upto: Timestamp,
    /// Blocks learned during transactions, merged at the next begin.
    pub pending: Vec<(BlockRef, CacheEntry)>,
}

impl Cache {
    /// How long the cached version is known to have stayed current.
    pub fn validity(&self, e: &CacheEntry, policy: CachePolicy) -> Timestamp {
        if policy == CachePolicy::Stale {
            e.valid_upto
        } else {
            e.valid_upto.max(self.upto)
        }
    }

    fn merge_pending(&mut self, policy: CachePolicy) {
        for (r, e) in std::mem::take(&mut self.pending) {
            // Under a coherent policy only entries that are current as of
            // the last feed may join; later changes arrive with the next one.
            if policy != CachePolicy::Stale && e.valid_upto < self.upto {
                continue;
            }
            let newer = self
                .blocks
                .get(&r)
                .is_none_or(|old| (e.write_ts, e.valid_upto) > (old.write_ts, old.valid_upto));
            if newer {
                self.blocks.insert(r, e);
            }
        }
    }

    fn apply(&mut self, batch: CacheUpdateBatch) {
        for item in batch.items {
            match item {
                CacheItem::BlockData {
                    block,
                    bytes,
                    write_ts,
                } => {
                    self.blocks.insert(
                        block,
                        CacheEntry {
                            bytes: Arc::new(bytes),
                            write_ts,
                            valid_upto: batch.upto,
                        },
                    );
                }
                CacheItem::BlockInvalidate(r) => {
                    self.blocks.remove(&r);
                }
                CacheItem::FileInvalidate(f) => self.blocks.retain(|r, _| r.file != f),
            }
        }
        self.upto = self.upto.max(batch.upto);
    }

    /// Digest of cached contents, for tests.
    pub fn fingerprint(&self) -> Vec<(BlockRef, Timestamp, Vec<u8>)> {
        let mut v: Vec<_> = self
            .blocks
            .iter()
            .map(|(r, e)| (*r, e.write_ts, e.bytes.as_ref().clone()))
            .collect();
        v.sort_by_key(|(r, _, _)| *r);
        v
    }
}

#[derive(Debug, Default)]
pub struct MountStats {
    pub cache_hits: AtomicU64,
    pub backend_fetches: AtomicU64,
    pub lock_calls: AtomicU64,
    pub begins: AtomicU64,
    pub commits: AtomicU64,
    pub aborts: AtomicU64,
}

impl MountStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

pub(crate) struct MountInner {
    pub transport: Arc<dyn Transport>,
    pub config: MountConfig,
    pub cache: Mutex<Cache>,
    pub stats: MountStats,
}

/// A client instance. Cheap to clone; clones share the cache.
#[derive(Clone)]
pub struct Mount {
    pub(crate) inner: Arc<MountInner>,
}

impl Mount {
    pub fn new(transport: Arc<dyn Transport>, config: MountConfig) -> Mount {
        assert!(config.block_size >= 1, "block size must be positive");
        Mount {
            inner: Arc::new(MountInner {
                transport,
                config,
                cache: Mutex::new(Cache::default()),
                stats: MountStats::default(),
            }),
        }
    }

    pub fn config(&self) -> &MountConfig {
        &self.inner.config
    }

    pub fn stats(&self) -> &MountStats {
        &self.inner.stats
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.inner.transport
    }

    /// Starts a transaction at the latest committed state, refreshing the
    /// cache first.
    pub fn begin(&self) -> Result<Txn, FsError> {
        self.begin_with(false)
    }

    /// Starts a transaction that may only read. Its reads are served at the
    /// snapshot, never from cache entries that might be older, so under a
    /// multiversioned backend it cannot abort.
    pub fn begin_read_only(&self) -> Result<Txn, FsError> {
        self.begin_with(true)
    }

    fn begin_with(&self, read_only: bool) -> Result<Txn, FsError> {
        let policy = self.inner.config.policy;
        let read_ts = {
            let mut cache = self.inner.cache.lock();
            cache.merge_pending(policy);
            let reply = self
                .inner
                .transport
                .begin(Some((cache.upto, policy)))
                .map_err(FsError::from)?;
            if let Some(batch) = reply.feed {
                cache.apply(batch);
            }
            reply.read_ts
        };
        self.inner.stats.begins.fetch_add(1, Ordering::Relaxed);
        Ok(Txn::new(self.clone(), read_ts, read_only))
    }

    /// Snapshot of the cache contents, sorted by block.
    pub fn cache_fingerprint(&self) -> Vec<(BlockRef, Timestamp, Vec<u8>)> {
        self.inner.cache.lock().fingerprint()
    }

    pub fn cache_upto(&self) -> Timestamp {
        self.inner.cache.lock().upto
    }

    pub fn cached_blocks(&self) -> usize {
        self.inner.cache.lock().blocks.len()
    }
}
