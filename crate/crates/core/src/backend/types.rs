use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlockRef, FileId, FileKind, LengthAssertion, Timestamp, WriteRecord};

/// A block the transaction read, and the time through which the version it
/// saw is known to have been current.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadEntry {
    pub block: BlockRef,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub file: FileId,
    pub kind: FileKind,
}

/// A namespace observation made at `ts`: the resolution of `path` and,
/// for directory listings, the entries seen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaRead {
    pub path: String,
    pub resolved: Option<FileId>,
    pub ts: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listing: Option<Vec<DirEntry>>,
}

/// Namespace and length mutations, applied in order before the write set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MetaOp {
    /// `file` is a provisional id the backend replaces with a fresh one.
    Create { path: String, file: FileId, mode: u32 },
    Mkdir { path: String, file: FileId, mode: u32 },
    Unlink { path: String },
    Rename { from: String, to: String },
    /// Exact length; shrinking zeroes the tail.
    SetLength { file: FileId, length: u64 },
    /// `max(current, length)`; emitted by writes past end of file.
    Extend { file: FileId, length: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRequest {
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteRecord>,
    pub meta_reads: Vec<MetaRead>,
    pub meta_ops: Vec<MetaOp>,
    pub assertions: Vec<LengthAssertion>,
    pub read_ts: Timestamp,
}

impl CommitRequest {
    pub fn is_read_only(&self) -> bool {
        self.write_set.is_empty() && self.meta_ops.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    StaleRead(BlockRef),
    LengthViolation(FileId),
    NamespaceConflict(String),
    SnapshotTooOld,
}

impl AbortReason {
    /// Stable label used in metrics histograms.
    pub fn label(&self) -> &'static str {
        match self {
            AbortReason::StaleRead(_) => "stale_read",
            AbortReason::LengthViolation(_) => "length_violation",
            AbortReason::NamespaceConflict(_) => "namespace_conflict",
            AbortReason::SnapshotTooOld => "snapshot_too_old",
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::StaleRead(b) => write!(f, "stale read of block {b}"),
            AbortReason::LengthViolation(file) => write!(f, "length assertion on file {file} failed"),
            AbortReason::NamespaceConflict(p) => write!(f, "namespace conflict on {p}"),
            AbortReason::SnapshotTooOld => f.write_str("snapshot too old"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitResult {
    Committed(Timestamp),
    Aborted(AbortReason),
}

impl CommitResult {
    pub fn is_committed(&self) -> bool {
        matches!(self, CommitResult::Committed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheItem {
    BlockData {
        block: BlockRef,
        #[serde(with = "crate::wire::b64")]
        bytes: Vec<u8>,
        write_ts: Timestamp,
    },
    BlockInvalidate(BlockRef),
    FileInvalidate(FileId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheUpdateBatch {
    pub upto: Timestamp,
    pub items: Vec<CacheItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTarget {
    Path(String),
    Id(FileId),
}

/// Errors surfaced by backend read operations. The reason strings carried on
/// the wire are the `Display` forms below.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("SnapshotTooOld")]
    SnapshotTooOld,
    #[error("NotFound")]
    NotFound,
    #[error("NotADirectory")]
    NotADirectory,
    #[error("Protocol: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn from_reason(reason: &str) -> BackendError {
        match reason {
            "SnapshotTooOld" => BackendError::SnapshotTooOld,
            "NotFound" => BackendError::NotFound,
            "NotADirectory" => BackendError::NotADirectory,
            other => BackendError::Protocol(
                other.strip_prefix("Protocol: ").unwrap_or(other).to_string(),
            ),
        }
    }
}

pub(crate) fn protocol(msg: impl Into<String>) -> BackendError {
    BackendError::Protocol(msg.into())
}
