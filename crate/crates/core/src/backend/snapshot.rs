//! Deterministic state snapshots: the namespace, per-file content digests
//! and, optionally, full file contents. File ids are not part of a snapshot,
//! so two stores holding the same tree compare equal however they got there.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::Versioned;
use super::types::{protocol, BackendError};
use super::{Inode, State};
use crate::model::{FileId, FileKind, Timestamp};
use crate::path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub path: String,
    pub kind: FileKind,
    pub length: u64,
    pub mode: u32,
    /// SHA-256 of the file content.
    pub digest: String,
    /// SHA-256 of each block, the last one zero-padded.
    pub blocks: Vec<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::wire::b64::option"
    )]
    pub content: Option<Vec<u8>>,
}

impl SnapshotEntry {
    pub fn new(
        path: String,
        kind: FileKind,
        mode: u32,
        content: &[u8],
        block_size: usize,
        full: bool,
    ) -> Self {
        let blocks = content
            .chunks(block_size)
            .map(|chunk| {
                let mut h = Sha256::new();
                h.update(chunk);
                if chunk.len() < block_size {
                    h.update(vec![0u8; block_size - chunk.len()]);
                }
                hex::encode(h.finalize())
            })
            .collect();
        SnapshotEntry {
            path,
            kind,
            length: content.len() as u64,
            mode,
            digest: hex::encode(Sha256::digest(content)),
            blocks,
            content: full.then(|| content.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub read_ts: Timestamp,
    pub block_size: usize,
    /// Sorted by path; includes the root.
    pub entries: Vec<SnapshotEntry>,
}

impl Snapshot {
    /// Hash over everything except full contents (which the per-entry
    /// digests already cover).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.read_ts.0.to_le_bytes());
        h.update((self.block_size as u64).to_le_bytes());
        for e in &self.entries {
            h.update(format!(
                "{}\0{:?}\0{}\0{:o}\0{}\0{}\n",
                e.path,
                e.kind,
                e.length,
                e.mode,
                e.digest,
                e.blocks.join(",")
            ));
        }
        hex::encode(h.finalize())
    }

    /// Same tree and contents, ignoring the timestamp.
    pub fn same_tree(&self, other: &Snapshot) -> bool {
        let strip = |s: &Snapshot| {
            s.entries
                .iter()
                .map(|e| (e.path.clone(), e.kind, e.length, e.mode, e.digest.clone(), e.blocks.clone()))
                .collect::<Vec<_>>()
        };
        self.block_size == other.block_size && strip(self) == strip(other)
    }

    pub fn entry(&self, path: &str) -> Option<&SnapshotEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.entries[i])
    }
}

fn file_content(state: &State, id: FileId, length: u64, bs: usize) -> Vec<u8> {
    let mut content = vec![0u8; length as usize];
    if let Some(blocks) = state.blocks.get(&id) {
        for (&n, cell) in blocks {
            let start = n as usize * bs;
            if start >= content.len() {
                break;
            }
            if let Some(bytes) = cell.current() {
                let end = (start + bs).min(content.len());
                content[start..end].copy_from_slice(&bytes[..end - start]);
            }
        }
    }
    content
}

pub(super) fn dump(state: &State, bs: usize, full: bool) -> Snapshot {
    let mut entries = Vec::new();
    let mut stack = vec![("/".to_string(), FileId::ROOT)];
    while let Some((p, id)) = stack.pop() {
        let Some(inode) = state.inodes.get(&id).and_then(|c| c.current().clone()) else {
            continue;
        };
        let content = match inode.kind {
            FileKind::Regular => file_content(state, id, inode.length, bs),
            FileKind::Directory => Vec::new(),
        };
        entries.push(SnapshotEntry::new(p.clone(), inode.kind, inode.mode, &content, bs, full));
        if inode.kind == FileKind::Directory {
            for ((_, name), cell) in state
                .entries
                .range((id, String::new())..)
                .take_while(|((parent, _), _)| *parent == id)
            {
                if let Some(child) = cell.current() {
                    stack.push((path::child(&p, name), *child));
                }
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Snapshot {
        read_ts: state.current,
        block_size: bs,
        entries,
    }
}

pub(super) fn restore(state: &mut State, snap: &Snapshot, bs: usize) -> Result<(), BackendError> {
    if snap.block_size != bs {
        return Err(protocol(format!(
            "snapshot block size {} does not match backend block size {bs}",
            snap.block_size
        )));
    }
    let ts = snap.read_ts;
    let mut sorted: Vec<&SnapshotEntry> = snap.entries.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut ids = std::collections::HashMap::new();
    ids.insert("/".to_string(), FileId::ROOT);

    for e in sorted {
        let inode = Inode {
            length: if e.kind == FileKind::Directory { 0 } else { e.length },
            mode: e.mode,
            kind: e.kind,
        };
        if e.path == "/" {
            state.inodes.insert(FileId::ROOT, Versioned::new(Some(inode), ts));
            continue;
        }
        let (parent, name) = path::split_parent(&e.path).map_err(|err| protocol(err.to_string()))?;
        let parent_id = *ids
            .get(&parent)
            .ok_or_else(|| protocol(format!("snapshot entry {} has no parent", e.path)))?;
        let id = FileId(state.next_file_id);
        state.next_file_id += 1;
        ids.insert(e.path.clone(), id);
        state.entries.insert((parent_id, name), Versioned::new(Some(id), ts));
        state.inodes.insert(id, Versioned::new(Some(inode), ts));

        if e.kind == FileKind::Regular && e.length > 0 {
            let content = e
                .content
                .as_ref()
                .ok_or_else(|| protocol(format!("snapshot entry {} carries no content", e.path)))?;
            if content.len() as u64 != e.length || hex::encode(Sha256::digest(content)) != e.digest {
                return Err(protocol(format!("snapshot content of {} does not match its digest", e.path)));
            }
            let blocks = state.blocks.entry(id).or_default();
            for (n, chunk) in content.chunks(bs).enumerate() {
                let mut bytes = chunk.to_vec();
                bytes.resize(bs, 0);
                blocks.insert(n as u64, Versioned::new(Some(bytes), ts));
            }
            state.file_ts.insert(id, ts);
        }
    }
    state.current = ts;
    state.log_start = ts;
    Ok(())
}
