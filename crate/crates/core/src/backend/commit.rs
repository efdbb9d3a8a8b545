//! Commit validation and application.
//!
//! Validation checks the read set against stored write timestamps, re-resolves
//! every namespace observation, and evaluates length assertions. Writers are
//! validated against the latest state. Read-only transactions under
//! multiversioning are validated against their own snapshot instead, which
//! always succeeds for reads served at the snapshot.
//!
//! Application is planned on an overlay first; only a plan that succeeds in
//! full is installed, so an abort leaves nothing behind.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::store::CellKey;
use super::types::{AbortReason, BackendError, CommitRequest, MetaOp};
use super::{BackendConfig, Inode, LogRecord, State};
use crate::model::{BlockRef, FileId, FileKind, Timestamp, VersioningMode};
use crate::path;

pub(super) fn check_well_formed(req: &CommitRequest, block_size: usize) -> Result<(), BackendError> {
    let protocol = |m: String| Err(BackendError::Protocol(m));
    for w in &req.write_set {
        if w.bytes.is_empty() {
            return protocol(format!("empty write to block {}", w.block));
        }
        if w.end() > block_size {
            return protocol(format!("write to block {} overruns the block", w.block));
        }
    }
    for r in &req.read_set {
        if r.block.file.is_provisional() {
            return protocol(format!("read of provisional file {}", r.block.file));
        }
        if r.ts > req.read_ts {
            return protocol(format!("read entry for {} is ahead of the snapshot", r.block));
        }
    }
    for m in &req.meta_reads {
        path::components(&m.path).map_err(|e| BackendError::Protocol(e.to_string()))?;
    }
    for op in &req.meta_ops {
        let paths: &[&String] = match op {
            MetaOp::Create { path, file, .. } | MetaOp::Mkdir { path, file, .. } => {
                if !file.is_provisional() {
                    return protocol(format!("create of {path} must carry a provisional id"));
                }
                &[path]
            }
            MetaOp::Unlink { path } => &[path],
            MetaOp::Rename { from, to } => &[from, to],
            MetaOp::SetLength { .. } | MetaOp::Extend { .. } => &[],
        };
        for p in paths {
            path::split_parent(p).map_err(|e| BackendError::Protocol(e.to_string()))?;
        }
    }
    Ok(())
}

pub(super) fn validate(
    state: &State,
    req: &CommitRequest,
    mode: VersioningMode,
) -> Result<(), AbortReason> {
    let snapshot_validation = req.is_read_only() && mode.is_multiversioned();
    let view_ts = if snapshot_validation {
        req.read_ts
    } else {
        state.current
    };
    let view = state.view(view_ts);
    // Views over retained state only fail when a version was pruned.
    let too_old = |_: BackendError| AbortReason::SnapshotTooOld;

    for entry in &req.read_set {
        let written = if snapshot_validation {
            view.block(entry.block).map_err(too_old)?.1
        } else if mode == VersioningMode::FileVersioned {
            state
                .file_ts
                .get(&entry.block.file)
                .copied()
                .unwrap_or(Timestamp::GENESIS)
        } else {
            state.block_write_ts(entry.block)
        };
        if written > entry.ts {
            return Err(AbortReason::StaleRead(entry.block));
        }
    }

    for read in &req.meta_reads {
        let conflict = || AbortReason::NamespaceConflict(read.path.clone());
        let resolved = view.resolve(&read.path).map_err(too_old)?;
        if resolved != read.resolved {
            return Err(conflict());
        }
        if let Some(expected) = &read.listing {
            let dir = resolved.ok_or_else(conflict)?;
            if &view.children(dir).map_err(too_old)? != expected {
                return Err(conflict());
            }
        }
    }

    for a in &req.assertions {
        let length = match view.inode(a.file).map_err(too_old)? {
            Some((inode, _)) => inode.length,
            None => return Err(AbortReason::LengthViolation(a.file)),
        };
        if !a.holds(length) {
            return Err(AbortReason::LengthViolation(a.file));
        }
    }
    Ok(())
}

pub(super) enum PlanError {
    Abort(AbortReason),
    Protocol(String),
}

type PlanResult<T> = Result<T, PlanError>;

fn conflict<T>(path: impl Into<String>) -> PlanResult<T> {
    Err(PlanError::Abort(AbortReason::NamespaceConflict(path.into())))
}

/// Changes computed against the latest state, ready to install.
pub(super) struct Plan {
    entries: BTreeMap<(FileId, String), Option<FileId>>,
    inodes: BTreeMap<FileId, Option<Inode>>,
    blocks: BTreeMap<BlockRef, Option<Vec<u8>>>,
    removed: Vec<FileId>,
    next_file_id: u64,
}

struct Planner<'s> {
    state: &'s State,
    plan: Plan,
    id_map: HashMap<FileId, FileId>,
    zero_from: BTreeMap<FileId, u64>,
}

impl<'s> Planner<'s> {
    fn entry(&self, parent: FileId, name: &str) -> Option<FileId> {
        let key = (parent, name.to_string());
        match self.plan.entries.get(&key) {
            Some(v) => *v,
            None => self.state.entries.get(&key).and_then(|c| *c.current()),
        }
    }

    fn inode(&self, id: FileId) -> Option<Inode> {
        match self.plan.inodes.get(&id) {
            Some(v) => v.clone(),
            None => self
                .state
                .inodes
                .get(&id)
                .and_then(|c| c.current().clone()),
        }
    }

    fn is_dir(&self, id: FileId) -> bool {
        self.inode(id).is_some_and(|i| i.kind == FileKind::Directory)
    }

    fn resolve(&self, p: &str) -> Option<FileId> {
        let comps = path::components(p).ok()?;
        let mut cur = FileId::ROOT;
        for c in comps {
            cur = self.entry(cur, c)?;
        }
        Some(cur)
    }

    fn has_children(&self, dir: FileId) -> bool {
        let planned = self
            .plan
            .entries
            .range((dir, String::new())..)
            .take_while(|((p, _), _)| *p == dir);
        let mut seen = BTreeSet::new();
        for ((_, name), v) in planned {
            if v.is_some() {
                return true;
            }
            seen.insert(name.as_str());
        }
        self.state
            .entries
            .range((dir, String::new())..)
            .take_while(|((p, _), _)| *p == dir)
            .any(|((_, name), c)| c.current().is_some() && !seen.contains(name.as_str()))
    }

    fn map_id(&self, id: FileId) -> PlanResult<FileId> {
        if id.is_provisional() {
            self.id_map
                .get(&id)
                .copied()
                .ok_or_else(|| PlanError::Protocol(format!("unknown provisional file {id}")))
        } else {
            Ok(id)
        }
    }

    /// Parent directory id and final name for a path that is being created.
    fn parent_of(&self, p: &str) -> PlanResult<(FileId, String)> {
        let (parent, name) = path::split_parent(p).map_err(|e| PlanError::Protocol(e.to_string()))?;
        match self.resolve(&parent) {
            Some(id) if self.is_dir(id) => Ok((id, name)),
            _ => conflict(p),
        }
    }

    fn remove_file(&mut self, id: FileId) {
        self.plan.inodes.insert(id, None);
        self.plan.removed.push(id);
    }

    fn create(&mut self, p: &str, prov: FileId, mode: u32, kind: FileKind) -> PlanResult<()> {
        let (parent, name) = self.parent_of(p)?;
        if self.entry(parent, &name).is_some() {
            return conflict(p);
        }
        if self.id_map.contains_key(&prov) {
            return Err(PlanError::Protocol(format!("provisional id {prov} reused")));
        }
        let id = FileId(self.plan.next_file_id);
        self.plan.next_file_id += 1;
        self.id_map.insert(prov, id);
        self.plan.entries.insert((parent, name), Some(id));
        self.plan.inodes.insert(
            id,
            Some(Inode {
                length: 0,
                mode,
                kind,
            }),
        );
        Ok(())
    }

    fn unlink(&mut self, p: &str) -> PlanResult<()> {
        let (parent, name) = self.parent_of(p)?;
        let Some(id) = self.entry(parent, &name) else {
            return conflict(p);
        };
        if self.is_dir(id) && self.has_children(id) {
            return conflict(p);
        }
        self.plan.entries.insert((parent, name), None);
        self.remove_file(id);
        Ok(())
    }

    fn rename(&mut self, from: &str, to: &str) -> PlanResult<()> {
        let (fp, fname) = self.parent_of(from)?;
        let Some(src) = self.entry(fp, &fname) else {
            return conflict(from);
        };
        let (tp, tname) = self.parent_of(to)?;
        if from == to {
            return Ok(());
        }
        let src_dir = self.is_dir(src);
        if src_dir && path::is_within(to, from) {
            return conflict(to);
        }
        if let Some(dst) = self.entry(tp, &tname) {
            let dst_dir = self.is_dir(dst);
            if src_dir != dst_dir || (dst_dir && self.has_children(dst)) {
                return conflict(to);
            }
            self.remove_file(dst);
        }
        self.plan.entries.insert((fp, fname), None);
        self.plan.entries.insert((tp, tname), Some(src));
        Ok(())
    }

    fn set_length(&mut self, file: FileId, length: u64, extend_only: bool) -> PlanResult<()> {
        let id = self.map_id(file)?;
        let Some(mut inode) = self.inode(id) else {
            return conflict(format!("#{id}"));
        };
        if inode.kind != FileKind::Regular {
            return Err(PlanError::Protocol(format!("length change on directory {id}")));
        }
        if extend_only {
            inode.length = inode.length.max(length);
        } else {
            if length < inode.length {
                let z = self.zero_from.entry(id).or_insert(length);
                *z = (*z).min(length);
            }
            inode.length = length;
        }
        self.plan.inodes.insert(id, Some(inode));
        Ok(())
    }

    fn block_base(&self, r: BlockRef) -> Option<Vec<u8>> {
        match self.plan.blocks.get(&r) {
            Some(v) => v.clone(),
            None => self
                .state
                .blocks
                .get(&r.file)
                .and_then(|m| m.get(&r.block))
                .and_then(|c| c.current().clone()),
        }
    }
}

pub(super) fn plan(state: &State, req: &CommitRequest, config: &BackendConfig) -> PlanResult<Plan> {
    let bs = config.block_size;
    let mut p = Planner {
        state,
        plan: Plan {
            entries: BTreeMap::new(),
            inodes: BTreeMap::new(),
            blocks: BTreeMap::new(),
            removed: Vec::new(),
            next_file_id: state.next_file_id,
        },
        id_map: HashMap::new(),
        zero_from: BTreeMap::new(),
    };

    for op in &req.meta_ops {
        match op {
            MetaOp::Create { path, file, mode } => p.create(path, *file, *mode, FileKind::Regular)?,
            MetaOp::Mkdir { path, file, mode } => p.create(path, *file, *mode, FileKind::Directory)?,
            MetaOp::Unlink { path } => p.unlink(path)?,
            MetaOp::Rename { from, to } => p.rename(from, to)?,
            MetaOp::SetLength { file, length } => p.set_length(*file, *length, false)?,
            MetaOp::Extend { file, length } => p.set_length(*file, *length, true)?,
        }
    }

    // Shrinks zero everything from the lowest truncation point onward.
    let zero_from = std::mem::take(&mut p.zero_from);
    for (file, z) in zero_from {
        if p.plan.removed.contains(&file) {
            continue;
        }
        let Some(blocks) = state.blocks.get(&file) else {
            continue;
        };
        let first = z / bs as u64;
        for (&n, cell) in blocks.range(first..) {
            let Some(bytes) = cell.current() else { continue };
            let start = n * bs as u64;
            let r = BlockRef::new(file, n);
            if start >= z {
                p.plan.blocks.insert(r, None);
            } else {
                let mut b = bytes.clone();
                b[(z - start) as usize..].fill(0);
                p.plan.blocks.insert(r, Some(b));
            }
        }
    }

    for file in p.plan.removed.clone() {
        if let Some(blocks) = state.blocks.get(&file) {
            for (&n, cell) in blocks {
                if cell.current().is_some() {
                    p.plan.blocks.insert(BlockRef::new(file, n), None);
                }
            }
        }
    }

    for w in &req.write_set {
        let id = p.map_id(w.block.file)?;
        let inode = match p.inode(id) {
            Some(i) if i.kind == FileKind::Regular => i,
            Some(_) => return Err(PlanError::Protocol(format!("write to directory {id}"))),
            None => return conflict(format!("#{id}")),
        };
        let end = w.block.block * bs as u64 + w.end() as u64;
        if end > inode.length {
            return Err(PlanError::Protocol(format!(
                "write to {} ends at {end}, past file length {}",
                w.block, inode.length
            )));
        }
        let r = BlockRef::new(id, w.block.block);
        let mut bytes = p.block_base(r).unwrap_or_else(|| vec![0; bs]);
        bytes[w.offset..w.end()].copy_from_slice(&w.bytes);
        p.plan.blocks.insert(r, Some(bytes));
    }

    if let Some(max) = config.max_file_size {
        for (id, inode) in &p.plan.inodes {
            if let Some(i) = inode {
                if i.length > max {
                    return Err(PlanError::Protocol(format!(
                        "file {id} would exceed the maximum size of {max} bytes"
                    )));
                }
            }
        }
    }
    Ok(p.plan)
}

pub(super) fn install(
    state: &mut State,
    plan: Plan,
    ts: Timestamp,
    keep_undo: bool,
    log_window: usize,
) {
    let mut log = LogRecord {
        ts,
        blocks: Vec::new(),
        removed: plan.removed.clone(),
    };

    for ((parent, name), value) in plan.entries {
        let cell = state
            .entries
            .entry((parent, name.clone()))
            .or_insert_with(|| super::Versioned::new(None, Timestamp::GENESIS));
        if *cell.current() != value && cell.set(value, ts, keep_undo) {
            state.undo.record(ts, CellKey::Entry(parent, name));
        }
    }

    for (id, value) in plan.inodes {
        let cell = state
            .inodes
            .entry(id)
            .or_insert_with(|| super::Versioned::new(None, Timestamp::GENESIS));
        if *cell.current() != value {
            let length_changed = cell.current().as_ref().map(|i| i.length)
                != value.as_ref().map(|i| i.length);
            if cell.set(value, ts, keep_undo) {
                state.undo.record(ts, CellKey::Inode(id));
            }
            if length_changed {
                state.file_ts.insert(id, ts);
            }
        }
    }

    for (r, value) in plan.blocks {
        let cell = state
            .blocks
            .entry(r.file)
            .or_default()
            .entry(r.block)
            .or_insert_with(|| super::Versioned::new(None, Timestamp::GENESIS));
        if cell.set(value, ts, keep_undo) {
            state.undo.record(ts, CellKey::Block(r));
        }
        state.file_ts.insert(r.file, ts);
        log.blocks.push(r);
    }

    if !keep_undo {
        // Unlinked files are unreachable and nothing serves their history.
        for id in &plan.removed {
            state.blocks.remove(id);
        }
    }

    state.next_file_id = plan.next_file_id;
    state.current = ts;
    state.log.push_back(log);
    while state.log.len() > log_window {
        if let Some(old) = state.log.pop_front() {
            state.log_start = old.ts;
        }
    }
}
