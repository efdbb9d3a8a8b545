use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::local::LocalFile;
use super::overlay::{Entry, Lookup, Node, Overlay};
use super::{CacheEntry, FsError, LockKind, Mount, OpenFlags, Whence};
use crate::backend::{
    AbortReason, CommitRequest, CommitResult, DirEntry, MetaOp, MetaRead, MetaTarget, ReadEntry,
};
use crate::model::{
    block_span, coalesce_writes, normalize_assertions, BlockRef, FileId, FileKind, FileMeta,
    LengthAssertion, Timestamp,
};
use crate::path;
use crate::wire::transport::{BackendApi, CallError};

pub type Fd = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Committed(Timestamp),
    Aborted(Option<AbortReason>),
    /// The commit request was sent but no reply arrived.
    Unknown,
}

#[derive(Debug, Clone)]
struct Handle {
    file: FileId,
    kind: FileKind,
    path: String,
    pos: u64,
    flags: OpenFlags,
}

#[derive(Debug, Clone)]
struct BaseBlock {
    bytes: Arc<Vec<u8>>,
    write_ts: Timestamp,
}

/// One transaction. Operations take `&mut self`; a transaction is used by
/// one thread at a time.
pub struct Txn {
    mount: Mount,
    read_ts: Timestamp,
    read_only: bool,
    state: TxnState,
    /// Snapshot blocks read so far, so repeated reads agree.
    memo: HashMap<BlockRef, BaseBlock>,
    reads: BTreeMap<BlockRef, Timestamp>,
    files: HashMap<FileId, LocalFile>,
    /// Snapshot metadata of files this transaction touched.
    base_meta: HashMap<FileId, FileMeta>,
    resolved: HashMap<String, Option<FileMeta>>,
    listings: HashMap<String, Vec<DirEntry>>,
    meta_reads: Vec<MetaRead>,
    meta_ops: Vec<MetaOp>,
    assertions: Vec<LengthAssertion>,
    overlay: Overlay,
    fds: BTreeMap<Fd, Handle>,
    next_fd: Fd,
    next_provisional: u64,
}

impl std::fmt::Debug for Txn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Txn")
            .field("read_ts", &self.read_ts)
            .field("state", &self.state)
            .field("reads", &self.reads.len())
            .field("meta_ops", &self.meta_ops)
            .finish()
    }
}

impl Txn {
    pub(super) fn new(mount: Mount, read_ts: Timestamp, read_only: bool) -> Txn {
        Txn {
            mount,
            read_ts,
            read_only,
            state: TxnState::Active,
            memo: HashMap::new(),
            reads: BTreeMap::new(),
            files: HashMap::new(),
            base_meta: HashMap::new(),
            resolved: HashMap::new(),
            listings: HashMap::new(),
            meta_reads: Vec::new(),
            meta_ops: Vec::new(),
            assertions: Vec::new(),
            overlay: Overlay::default(),
            fds: BTreeMap::new(),
            next_fd: 3,
            next_provisional: 1,
        }
    }

    pub fn read_ts(&self) -> Timestamp {
        self.read_ts
    }

    pub fn state(&self) -> &TxnState {
        &self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == TxnState::Active
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    fn bs(&self) -> usize {
        self.mount.inner.config.block_size
    }

    fn ensure_active(&self) -> Result<(), FsError> {
        if self.is_active() {
            Ok(())
        } else {
            Err(FsError::NotActive)
        }
    }

    fn ensure_mutable(&self) -> Result<(), FsError> {
        self.ensure_active()?;
        if self.read_only {
            Err(FsError::ReadOnlyTransaction)
        } else {
            Ok(())
        }
    }

    /// Maps a backend call failure, aborting early on SnapshotTooOld.
    fn fail(&mut self, e: CallError) -> FsError {
        let e = FsError::from(e);
        if let FsError::Aborted(reason) = &e {
            self.state = TxnState::Aborted(Some(reason.clone()));
            self.mount.inner.stats.aborts.fetch_add(1, Ordering::Relaxed);
        }
        e
    }

    // ----- namespace -----

    fn snapshot_meta(&mut self, p: &str) -> Result<Option<FileMeta>, FsError> {
        if let Some(m) = self.resolved.get(p) {
            return Ok(m.clone());
        }
        let got = self
            .mount
            .inner
            .transport
            .get_meta(MetaTarget::Path(p.to_string()), self.read_ts);
        let meta = got.map_err(|e| self.fail(e))?;
        self.meta_reads.push(MetaRead {
            path: p.to_string(),
            resolved: meta.as_ref().map(|m| m.file),
            ts: self.read_ts,
            listing: None,
        });
        if let Some(m) = &meta {
            self.base_meta.entry(m.file).or_insert_with(|| m.clone());
        }
        self.resolved.insert(p.to_string(), meta.clone());
        Ok(meta)
    }

    fn resolve(&mut self, p: &str) -> Result<Option<Entry>, FsError> {
        path::components(p)?;
        match self.overlay.lookup(p) {
            Lookup::Decided(e) => Ok(e.cloned()),
            Lookup::Snapshot(origin) => Ok(self.snapshot_meta(&origin)?.map(|m| Entry {
                id: m.file,
                kind: m.kind,
                mode: m.mode,
                origin: Some(origin),
            })),
        }
    }

    /// Resolves the parent of a path that is about to be bound.
    fn resolve_parent(&mut self, p: &str) -> Result<(), FsError> {
        let (parent, _) = path::split_parent(p).map_err(|_| FsError::InvalidArgument(p.to_string()))?;
        match self.resolve(&parent)? {
            None => Err(FsError::NotFound(parent)),
            Some(e) if e.kind != FileKind::Directory => Err(FsError::NotADirectory(parent)),
            Some(_) => Ok(()),
        }
    }

    fn list(&mut self, dir_path: &str, entry: &Entry) -> Result<Vec<DirEntry>, FsError> {
        let mut names: BTreeMap<String, DirEntry> = BTreeMap::new();
        if let Some(origin) = entry.origin.clone() {
            let listing = match self.listings.get(&origin) {
                Some(l) => l.clone(),
                None => {
                    let got = self.mount.inner.transport.list_dir(&origin, self.read_ts);
                    let l = got.map_err(|e| self.fail(e))?;
                    self.meta_reads.push(MetaRead {
                        path: origin.clone(),
                        resolved: Some(entry.id),
                        ts: self.read_ts,
                        listing: Some(l.clone()),
                    });
                    self.listings.insert(origin, l.clone());
                    l
                }
            };
            for e in listing {
                names.insert(e.name.clone(), e);
            }
        }
        for (name, node) in self.overlay.children(dir_path) {
            match node {
                Node::Gone => {
                    names.remove(&name);
                }
                Node::Present(e) => {
                    names.insert(
                        name.clone(),
                        DirEntry {
                            name,
                            file: e.id,
                            kind: e.kind,
                        },
                    );
                }
            }
        }
        Ok(names.into_values().collect())
    }

    fn provisional(&mut self) -> FileId {
        let id = FileId::provisional(self.next_provisional);
        self.next_provisional += 1;
        id
    }

    fn local(&mut self, id: FileId) -> Result<&mut LocalFile, FsError> {
        if !self.files.contains_key(&id) {
            let base_len = match self.base_meta.get(&id) {
                Some(m) => m.length,
                None => {
                    let got = self.mount.inner.transport.get_meta(MetaTarget::Id(id), self.read_ts);
                    let meta = got.map_err(|e| self.fail(e))?;
                    let m = meta.ok_or_else(|| FsError::NotFound(format!("#{id}")))?;
                    self.base_meta.insert(id, m.clone());
                    m.length
                }
            };
            self.files.insert(id, LocalFile::existing(base_len));
        }
        Ok(self.files.get_mut(&id).expect("inserted above"))
    }

    fn observe_length(&mut self, id: FileId) -> Result<u64, FsError> {
        let lf = self.local(id)?;
        let len = lf.len();
        if let Some(a) = lf.length_observation(id) {
            self.assertions.push(a);
        }
        Ok(len)
    }

    /// Opens `path`. Descriptors are local to this transaction.
    pub fn open(&mut self, p: &str, flags: OpenFlags, mode: u32) -> Result<Fd, FsError> {
        self.ensure_active()?;
        if flags.writable() || flags.contains(OpenFlags::CREATE) || flags.contains(OpenFlags::TRUNC) {
            self.ensure_mutable()?;
        }
        let entry = match self.resolve(p)? {
            Some(e) => {
                if flags.contains(OpenFlags::CREATE | OpenFlags::EXCL) {
                    return Err(FsError::AlreadyExists(p.to_string()));
                }
                if e.kind == FileKind::Directory && flags.writable() {
                    return Err(FsError::IsADirectory(p.to_string()));
                }
                if flags.contains(OpenFlags::TRUNC) && flags.writable() && e.kind == FileKind::Regular {
                    self.truncate_id(e.id, 0)?;
                }
                e
            }
            None if flags.contains(OpenFlags::CREATE) => {
                self.resolve_parent(p)?;
                let id = self.provisional();
                self.meta_ops.push(MetaOp::Create {
                    path: p.to_string(),
                    file: id,
                    mode,
                });
                let e = Entry {
                    id,
                    kind: FileKind::Regular,
                    mode,
                    origin: None,
                };
                self.overlay.set(p, Node::Present(e.clone()));
                self.files.insert(id, LocalFile::created());
                e
            }
            None => return Err(FsError::NotFound(p.to_string())),
        };
        let fd = self.next_fd;
        self.next_fd += 1;
        self.fds.insert(
            fd,
            Handle {
                file: entry.id,
                kind: entry.kind,
                path: p.to_string(),
                pos: 0,
                flags,
            },
        );
        Ok(fd)
    }

    pub fn close(&mut self, fd: Fd) -> Result<(), FsError> {
        self.ensure_active()?;
        self.fds.remove(&fd).map(|_| ()).ok_or(FsError::BadDescriptor(fd))
    }

    fn handle(&self, fd: Fd) -> Result<&Handle, FsError> {
        self.fds.get(&fd).ok_or(FsError::BadDescriptor(fd))
    }

    /// The file id behind a descriptor (provisional for files created here).
    pub fn file_of(&self, fd: Fd) -> Result<FileId, FsError> {
        Ok(self.handle(fd)?.file)
    }

    // ----- data -----

    /// Snapshot bytes of one block, from the memo, the cache or the backend.
    fn base_block(&mut self, r: BlockRef) -> Result<Arc<Vec<u8>>, FsError> {
        if let Some(b) = self.memo.get(&r) {
            return Ok(Arc::clone(&b.bytes));
        }
        let policy = self.mount.inner.config.policy;
        let hit = {
            let cache = self.mount.inner.cache.lock();
            cache.blocks.get(&r).and_then(|e| {
                let valid = cache.validity(e, policy);
                let usable = e.write_ts <= self.read_ts && (!self.read_only || valid >= self.read_ts);
                usable.then(|| (e.clone(), valid.min(self.read_ts)))
            })
        };
        let (base, seen_through) = match hit {
            Some((e, seen_through)) => {
                self.mount.inner.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                (
                    BaseBlock {
                        bytes: e.bytes,
                        write_ts: e.write_ts,
                    },
                    seen_through,
                )
            }
            None => {
                let got = self.mount.inner.transport.get_block(r, self.read_ts);
                let (bytes, write_ts) = got.map_err(|e| self.fail(e))?;
                self.mount.inner.stats.backend_fetches.fetch_add(1, Ordering::Relaxed);
                let bytes = Arc::new(bytes);
                self.mount.inner.cache.lock().pending.push((
                    r,
                    CacheEntry {
                        bytes: Arc::clone(&bytes),
                        write_ts,
                        valid_upto: self.read_ts,
                    },
                ));
                (BaseBlock { bytes, write_ts }, self.read_ts)
            }
        };
        self.reads.insert(r, seen_through);
        let bytes = Arc::clone(&base.bytes);
        self.memo.insert(r, base);
        Ok(bytes)
    }

    /// Reads up to `count` bytes at `offset` without moving the position.
    pub fn pread(&mut self, fd: Fd, count: usize, offset: u64) -> Result<Vec<u8>, FsError> {
        self.ensure_active()?;
        let h = self.handle(fd)?.clone();
        if !h.flags.readable() {
            return Err(FsError::ReadOnlyHandle(fd));
        }
        if h.kind == FileKind::Directory {
            return Err(FsError::IsADirectory(h.path));
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let bs = self.bs();
        let lf = self.local(h.file)?;
        let assertion = lf.read_assertion(h.file, offset, count as u64);
        let n = (count as u64).min(lf.len().saturating_sub(offset));
        self.assertions.extend(assertion);
        let mut out = Vec::with_capacity(n as usize);
        for s in block_span(offset, n, bs) {
            let lf = &self.files[&h.file];
            let base = if lf.needs_base(bs, s) {
                Some(self.base_block(BlockRef::new(h.file, s.block))?)
            } else {
                None
            };
            let view = self.files[&h.file].view(bs, s.block, base.as_deref().map(|v| v.as_slice()));
            out.extend_from_slice(&view[s.offset..s.offset + s.len]);
        }
        Ok(out)
    }

    /// Reads at the current position and advances it.
    pub fn read(&mut self, fd: Fd, count: usize) -> Result<Vec<u8>, FsError> {
        self.ensure_active()?;
        let pos = self.handle(fd)?.pos;
        let out = self.pread(fd, count, pos)?;
        self.fds.get_mut(&fd).expect("checked").pos = pos + out.len() as u64;
        Ok(out)
    }

    fn check_writable(&self, fd: Fd) -> Result<Handle, FsError> {
        self.ensure_mutable()?;
        let h = self.handle(fd)?.clone();
        if !h.flags.writable() {
            return Err(FsError::ReadOnlyHandle(fd));
        }
        Ok(h)
    }

    /// Buffers a write at `offset`. Under append mode the offset is ignored
    /// and the bytes go to the end of the file.
    pub fn pwrite(&mut self, fd: Fd, bytes: &[u8], offset: u64) -> Result<usize, FsError> {
        let h = self.check_writable(fd)?;
        let offset = if h.flags.contains(OpenFlags::APPEND) {
            self.observe_length(h.file)?
        } else {
            offset
        };
        if !bytes.is_empty() {
            let bs = self.bs();
            self.local(h.file)?.write(bs, offset, bytes);
        }
        Ok(bytes.len())
    }

    /// Writes at the current position (or the end, under append) and
    /// advances the position past the written bytes.
    pub fn write(&mut self, fd: Fd, bytes: &[u8]) -> Result<usize, FsError> {
        let h = self.check_writable(fd)?;
        let offset = if h.flags.contains(OpenFlags::APPEND) {
            self.observe_length(h.file)?
        } else {
            h.pos
        };
        let n = self.pwrite_at(h.file, offset, bytes)?;
        self.fds.get_mut(&fd).expect("checked").pos = offset + n as u64;
        Ok(n)
    }

    fn pwrite_at(&mut self, file: FileId, offset: u64, bytes: &[u8]) -> Result<usize, FsError> {
        if !bytes.is_empty() {
            let bs = self.bs();
            self.local(file)?.write(bs, offset, bytes);
        }
        Ok(bytes.len())
    }

    pub fn seek(&mut self, fd: Fd, offset: i64, whence: Whence) -> Result<u64, FsError> {
        self.ensure_active()?;
        let h = self.handle(fd)?.clone();
        let base = match whence {
            Whence::Set => 0,
            Whence::Cur => h.pos as i128,
            Whence::End => {
                if h.kind == FileKind::Directory {
                    0
                } else {
                    self.observe_length(h.file)? as i128
                }
            }
        };
        let pos = base + offset as i128;
        if pos < 0 || pos > u64::MAX as i128 {
            return Err(FsError::InvalidOffset);
        }
        self.fds.get_mut(&fd).expect("checked").pos = pos as u64;
        Ok(pos as u64)
    }

    fn truncate_id(&mut self, id: FileId, length: u64) -> Result<(), FsError> {
        let bs = self.bs();
        self.local(id)?.truncate(bs, length);
        self.meta_ops.push(MetaOp::SetLength { file: id, length });
        Ok(())
    }

    pub fn truncate(&mut self, p: &str, length: u64) -> Result<(), FsError> {
        self.ensure_mutable()?;
        let e = self.resolve(p)?.ok_or_else(|| FsError::NotFound(p.to_string()))?;
        if e.kind == FileKind::Directory {
            return Err(FsError::IsADirectory(p.to_string()));
        }
        self.truncate_id(e.id, length)
    }

    pub fn ftruncate(&mut self, fd: Fd, length: u64) -> Result<(), FsError> {
        let h = self.check_writable(fd)?;
        if h.kind == FileKind::Directory {
            return Err(FsError::IsADirectory(h.path));
        }
        self.truncate_id(h.file, length)
    }

    // ----- metadata -----

    fn meta_of(&mut self, e: &Entry) -> Result<FileMeta, FsError> {
        let length = match e.kind {
            FileKind::Directory => 0,
            FileKind::Regular => self.observe_length(e.id)?,
        };
        let meta_version = self
            .base_meta
            .get(&e.id)
            .map_or(self.read_ts, |m| m.meta_version);
        Ok(FileMeta {
            file: e.id,
            length,
            mode: e.mode,
            kind: e.kind,
            meta_version,
        })
    }

    pub fn stat(&mut self, p: &str) -> Result<FileMeta, FsError> {
        self.ensure_active()?;
        let e = self.resolve(p)?.ok_or_else(|| FsError::NotFound(p.to_string()))?;
        self.meta_of(&e)
    }

    pub fn fstat(&mut self, fd: Fd) -> Result<FileMeta, FsError> {
        self.ensure_active()?;
        let h = self.handle(fd)?.clone();
        let mode = self
            .base_meta
            .get(&h.file)
            .map(|m| m.mode)
            .or_else(|| {
                self.meta_ops.iter().find_map(|op| match op {
                    MetaOp::Create { file, mode, .. } if *file == h.file => Some(*mode),
                    _ => None,
                })
            })
            .unwrap_or(0o644);
        self.meta_of(&Entry {
            id: h.file,
            kind: h.kind,
            mode,
            origin: None,
        })
    }

    pub fn exists(&mut self, p: &str) -> Result<bool, FsError> {
        self.ensure_active()?;
        Ok(self.resolve(p)?.is_some())
    }

    pub fn readdir(&mut self, p: &str) -> Result<Vec<DirEntry>, FsError> {
        self.ensure_active()?;
        let e = self.resolve(p)?.ok_or_else(|| FsError::NotFound(p.to_string()))?;
        if e.kind != FileKind::Directory {
            return Err(FsError::NotADirectory(p.to_string()));
        }
        let canonical = path::join(&path::components(p)?);
        self.list(&canonical, &e)
    }

    pub fn mkdir(&mut self, p: &str, mode: u32) -> Result<(), FsError> {
        self.ensure_mutable()?;
        if self.resolve(p)?.is_some() {
            return Err(FsError::AlreadyExists(p.to_string()));
        }
        self.resolve_parent(p)?;
        let id = self.provisional();
        self.meta_ops.push(MetaOp::Mkdir {
            path: p.to_string(),
            file: id,
            mode,
        });
        self.overlay.set(
            p,
            Node::Present(Entry {
                id,
                kind: FileKind::Directory,
                mode,
                origin: None,
            }),
        );
        Ok(())
    }

    fn mark_removed(&mut self, e: &Entry) {
        if e.kind == FileKind::Regular {
            self.files.entry(e.id).or_insert_with(|| LocalFile::existing(0)).removed = true;
        }
        self.fds.retain(|_, h| h.file != e.id);
    }

    /// Removes a file or an empty directory.
    pub fn unlink(&mut self, p: &str) -> Result<(), FsError> {
        self.ensure_mutable()?;
        if p == "/" {
            return Err(FsError::InvalidArgument("cannot remove the root".into()));
        }
        let e = self.resolve(p)?.ok_or_else(|| FsError::NotFound(p.to_string()))?;
        if e.kind == FileKind::Directory && !self.list(p, &e)?.is_empty() {
            return Err(FsError::DirectoryNotEmpty(p.to_string()));
        }
        self.meta_ops.push(MetaOp::Unlink { path: p.to_string() });
        self.overlay.clear_below(p);
        self.overlay.set(p, Node::Gone);
        self.mark_removed(&e);
        Ok(())
    }

    pub fn rmdir(&mut self, p: &str) -> Result<(), FsError> {
        self.ensure_mutable()?;
        match self.resolve(p)? {
            None => Err(FsError::NotFound(p.to_string())),
            Some(e) if e.kind != FileKind::Directory => Err(FsError::NotADirectory(p.to_string())),
            Some(_) => self.unlink(p),
        }
    }

    /// Atomically renames `from` to `to`, replacing a compatible target.
    pub fn rename(&mut self, from: &str, to: &str) -> Result<(), FsError> {
        self.ensure_mutable()?;
        if from == "/" || to == "/" {
            return Err(FsError::InvalidArgument("cannot rename the root".into()));
        }
        let src = self.resolve(from)?.ok_or_else(|| FsError::NotFound(from.to_string()))?;
        path::components(to)?;
        if from == to {
            return Ok(());
        }
        if src.kind == FileKind::Directory && path::is_within(to, from) {
            return Err(FsError::InvalidArgument(format!("cannot move {from} into itself")));
        }
        self.resolve_parent(to)?;
        if let Some(dst) = self.resolve(to)? {
            match (src.kind, dst.kind) {
                (FileKind::Regular, FileKind::Directory) => return Err(FsError::IsADirectory(to.to_string())),
                (FileKind::Directory, FileKind::Regular) => return Err(FsError::NotADirectory(to.to_string())),
                (FileKind::Directory, FileKind::Directory) => {
                    if !self.list(to, &dst)?.is_empty() {
                        return Err(FsError::DirectoryNotEmpty(to.to_string()));
                    }
                }
                _ => {}
            }
            self.mark_removed(&dst);
        }
        self.meta_ops.push(MetaOp::Rename {
            from: from.to_string(),
            to: to.to_string(),
        });
        self.overlay.rename(from, to, src);
        Ok(())
    }

    pub fn symlink(&mut self, _target: &str, _link: &str) -> Result<(), FsError> {
        Err(FsError::Unsupported("symbolic links"))
    }

    pub fn link(&mut self, _existing: &str, _new: &str) -> Result<(), FsError> {
        Err(FsError::Unsupported("hard links"))
    }

    // ----- local no-ops -----

    /// Byte-range locks always succeed at once; commit validation provides
    /// the isolation they would have.
    pub fn lock(&mut self, fd: Fd, _range: std::ops::Range<u64>, _kind: LockKind) -> Result<(), FsError> {
        self.ensure_active()?;
        self.handle(fd)?;
        self.mount.inner.stats.lock_calls.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn unlock(&mut self, fd: Fd, _range: std::ops::Range<u64>) -> Result<(), FsError> {
        self.lock(fd, 0..0, LockKind::Shared)
    }

    /// Durability happens at commit; nothing to do here.
    pub fn fsync(&mut self, fd: Fd) -> Result<(), FsError> {
        self.ensure_active()?;
        self.handle(fd).map(|_| ())
    }

    // ----- completion -----

    /// The request this transaction would send if it committed now.
    pub fn footprint(&self) -> CommitRequest {
        let bs = self.bs();
        let mut ids: Vec<&FileId> = self.files.keys().collect();
        ids.sort();
        let mut write_set = Vec::new();
        let mut extends = Vec::new();
        for id in ids {
            let lf = &self.files[id];
            if lf.removed || !lf.has_writes() {
                continue;
            }
            write_set.extend(coalesce_writes(&lf.write_records(*id)));
            if let Some(end) = lf.max_write_end(bs) {
                extends.push(MetaOp::Extend { file: *id, length: end });
            }
        }
        let removed = |f: &FileId| self.files.get(f).is_some_and(|lf| lf.removed);
        let mut meta_ops: Vec<MetaOp> = self
            .meta_ops
            .iter()
            .filter(|op| match op {
                MetaOp::SetLength { file, .. } | MetaOp::Extend { file, .. } => !removed(file),
                _ => true,
            })
            .cloned()
            .collect();
        meta_ops.extend(extends);
        CommitRequest {
            read_set: self
                .reads
                .iter()
                .map(|(block, ts)| ReadEntry {
                    block: *block,
                    ts: *ts,
                })
                .collect(),
            write_set,
            meta_reads: self.meta_reads.clone(),
            meta_ops,
            assertions: normalize_assertions(&self.assertions),
            read_ts: self.read_ts,
        }
    }

    /// Ships the footprint to the backend. `Err` means the outcome is not
    /// known or the request was refused; either way the transaction is over.
    pub fn commit(&mut self) -> Result<CommitResult, FsError> {
        self.commit_traced().0
    }

    /// Like [`Txn::commit`], also returning the request that was sent.
    pub fn commit_traced(&mut self) -> (Result<CommitResult, FsError>, Option<CommitRequest>) {
        if let Err(e) = self.ensure_active() {
            return (Err(e), None);
        }
        let req = self.footprint();
        self.fds.clear();
        let stats = &self.mount.inner.stats;
        let empty = req.read_set.is_empty()
            && req.write_set.is_empty()
            && req.meta_reads.is_empty()
            && req.meta_ops.is_empty()
            && req.assertions.is_empty();
        if empty {
            self.state = TxnState::Committed(self.read_ts);
            stats.commits.fetch_add(1, Ordering::Relaxed);
            return (Ok(CommitResult::Committed(self.read_ts)), Some(req));
        }
        let outcome = self.mount.inner.transport.commit(req.clone());
        let result = match outcome {
            Ok(CommitResult::Committed(ts)) => {
                self.state = TxnState::Committed(ts);
                stats.commits.fetch_add(1, Ordering::Relaxed);
                if self.mount.inner.config.fold_in {
                    self.fold_in(ts, req.is_read_only());
                }
                Ok(CommitResult::Committed(ts))
            }
            Ok(CommitResult::Aborted(reason)) => {
                self.state = TxnState::Aborted(Some(reason.clone()));
                stats.aborts.fetch_add(1, Ordering::Relaxed);
                Ok(CommitResult::Aborted(reason))
            }
            Err(CallError::Transport(t)) => {
                self.state = TxnState::Unknown;
                Err(FsError::Indeterminate(t))
            }
            Err(CallError::Backend(e)) => {
                self.state = TxnState::Aborted(None);
                Err(FsError::Protocol(e.to_string()))
            }
        };
        (result, Some(req))
    }

    /// Leaves the committed contents of blocks this transaction fully knows
    /// for the next begin to pick up.
    fn fold_in(&mut self, ts: Timestamp, read_only: bool) {
        let bs = self.bs();
        // A read-only commit is validated at its snapshot only.
        let known_through = if read_only { self.read_ts } else { ts };
        let mut entries = Vec::new();
        for (id, lf) in &self.files {
            if id.is_provisional() || lf.removed {
                continue;
            }
            let mut blocks: Vec<u64> = lf.writes.keys().copied().collect();
            blocks.extend(self.memo.keys().filter(|r| r.file == *id).map(|r| r.block));
            blocks.sort_unstable();
            blocks.dedup();
            for block in blocks {
                let r = BlockRef::new(*id, block);
                let written = lf.writes.contains_key(&block) || lf.zero_from.is_some();
                let base = self.memo.get(&r);
                if base.is_none() && !lf.fully_determined(bs, block) {
                    continue;
                }
                let bytes = lf.view(bs, block, base.map(|b| b.bytes.as_slice()));
                let write_ts = match base {
                    Some(b) if !written => b.write_ts,
                    _ => ts,
                };
                entries.push((
                    r,
                    CacheEntry {
                        bytes: Arc::new(bytes),
                        write_ts,
                        valid_upto: known_through,
                    },
                ));
            }
        }
        // Blocks read from files this transaction never wrote.
        for (r, b) in &self.memo {
            if !self.files.contains_key(&r.file) {
                entries.push((
                    *r,
                    CacheEntry {
                        bytes: Arc::clone(&b.bytes),
                        write_ts: b.write_ts,
                        valid_upto: known_through,
                    },
                ));
            }
        }
        self.mount.inner.cache.lock().pending.extend(entries);
    }

    /// Discards everything buffered. No backend traffic.
    pub fn abort(&mut self) {
        if self.is_active() {
            self.state = TxnState::Aborted(None);
            self.mount.inner.stats.aborts.fetch_add(1, Ordering::Relaxed);
        }
        self.fds.clear();
    }
}
