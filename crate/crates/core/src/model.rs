//! Shared domain types and pure helpers used by the backend, the client and
//! the workload harness.
//!
//! Files are arrays of fixed-size blocks. A transaction's footprint is
//! expressed in terms of blocks ([`BlockRef`]), partial block updates
//! ([`WriteRecord`]) and predicates over file length ([`LengthAssertion`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default block size in bytes.
pub const DEFAULT_BLOCK_SIZE: usize = 1024;

/// Logical commit/read time. `0` is the genesis state; every committed
/// writer receives a strictly larger value than the one before it.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const GENESIS: Timestamp = Timestamp(0);

    pub fn next(self) -> Timestamp {
        Timestamp(self.0 + 1)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Backend-allocated file identity. Stable across rename; never reused.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct FileId(pub u64);

impl FileId {
    /// The root directory.
    pub const ROOT: FileId = FileId(1);

    /// Ids with this bit set are provisional: a client allocated them for
    /// files created inside a transaction, and the backend replaces them
    /// with real ids at commit.
    pub const PROVISIONAL_BIT: u64 = 1 << 63;

    pub fn provisional(n: u64) -> FileId {
        FileId(Self::PROVISIONAL_BIT | n)
    }

    pub fn is_provisional(self) -> bool {
        self.0 & Self::PROVISIONAL_BIT != 0
    }
}

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_provisional() {
            write!(f, "tmp{}", self.0 & !Self::PROVISIONAL_BIT)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct BlockRef {
    pub file: FileId,
    pub block: u64,
}

impl BlockRef {
    pub fn new(file: FileId, block: u64) -> Self {
        BlockRef { file, block }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.block)
    }
}

/// A partial update of one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub block: BlockRef,
    pub offset: usize,
    #[serde(with = "crate::wire::b64")]
    pub bytes: Vec<u8>,
}

impl WriteRecord {
    pub fn new(block: BlockRef, offset: usize, bytes: impl Into<Vec<u8>>) -> Self {
        WriteRecord {
            block,
            offset,
            bytes: bytes.into(),
        }
    }

    pub fn end(&self) -> usize {
        self.offset + self.bytes.len()
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AssertionKind {
    AtLeast,
    AtMost,
    Exactly,
}

/// A predicate over a file's committed length.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct LengthAssertion {
    pub file: FileId,
    pub kind: AssertionKind,
    pub length: u64,
}

impl LengthAssertion {
    pub fn at_least(file: FileId, length: u64) -> Self {
        LengthAssertion {
            file,
            kind: AssertionKind::AtLeast,
            length,
        }
    }

    pub fn at_most(file: FileId, length: u64) -> Self {
        LengthAssertion {
            file,
            kind: AssertionKind::AtMost,
            length,
        }
    }

    pub fn exactly(file: FileId, length: u64) -> Self {
        LengthAssertion {
            file,
            kind: AssertionKind::Exactly,
            length,
        }
    }

    pub fn holds(&self, actual: u64) -> bool {
        match self.kind {
            AssertionKind::AtLeast => actual >= self.length,
            AssertionKind::AtMost => actual <= self.length,
            AssertionKind::Exactly => actual == self.length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Regular,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub file: FileId,
    pub length: u64,
    pub mode: u32,
    pub kind: FileKind,
    pub meta_version: Timestamp,
}

impl FileMeta {
    pub fn is_dir(&self) -> bool {
        self.kind == FileKind::Directory
    }
}

/// How the backend tracks versions, fixed for a backend's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersioningMode {
    /// One write timestamp per file; validation is file-grained.
    FileVersioned,
    /// One write timestamp per block.
    BlockVersioned,
    /// Per-block timestamps plus an undo log serving past versions.
    BlockMultiversioned,
}

impl VersioningMode {
    pub const ALL: [VersioningMode; 3] = [
        VersioningMode::FileVersioned,
        VersioningMode::BlockVersioned,
        VersioningMode::BlockMultiversioned,
    ];

    /// Short name used on the command line and in reports.
    pub fn short_name(self) -> &'static str {
        match self {
            VersioningMode::FileVersioned => "file",
            VersioningMode::BlockVersioned => "block",
            VersioningMode::BlockMultiversioned => "block-mv",
        }
    }

    pub fn from_short_name(s: &str) -> Option<VersioningMode> {
        VersioningMode::ALL
            .into_iter()
            .find(|m| m.short_name() == s)
    }

    pub fn is_multiversioned(self) -> bool {
        self == VersioningMode::BlockMultiversioned
    }
}

impl fmt::Display for VersioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// How a client cache is refreshed at transaction begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    UpdateAll,
    InvalidateOnly,
    Frequency,
    Stale,
}

impl CachePolicy {
    pub const ALL: [CachePolicy; 4] = [
        CachePolicy::UpdateAll,
        CachePolicy::InvalidateOnly,
        CachePolicy::Frequency,
        CachePolicy::Stale,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            CachePolicy::UpdateAll => "update-all",
            CachePolicy::InvalidateOnly => "invalidate",
            CachePolicy::Frequency => "frequency",
            CachePolicy::Stale => "stale",
        }
    }

    pub fn from_short_name(s: &str) -> Option<CachePolicy> {
        CachePolicy::ALL.into_iter().find(|p| p.short_name() == s)
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One contiguous piece of a byte range that falls inside a single block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub block: u64,
    pub offset: usize,
    pub len: usize,
}

/// Splits `[offset, offset + length)` into per-block pieces, in order.
pub fn block_span(offset: u64, length: u64, block_size: usize) -> Vec<Span> {
    assert!(block_size >= 1, "block size must be positive");
    let bs = block_size as u64;
    let mut spans = Vec::new();
    let mut pos = offset;
    let end = offset + length;
    while pos < end {
        let block = pos / bs;
        let in_block = pos % bs;
        let len = (bs - in_block).min(end - pos);
        spans.push(Span {
            block,
            offset: in_block as usize,
            len: len as usize,
        });
        pos += len;
    }
    spans
}

/// Overlays `writes` onto `base` in order. Records past the end of `base`
/// are clipped.
pub fn apply_writes(base: &mut [u8], writes: &[WriteRecord]) {
    for w in writes {
        if w.offset >= base.len() {
            continue;
        }
        let end = w.end().min(base.len());
        base[w.offset..end].copy_from_slice(&w.bytes[..end - w.offset]);
    }
}

/// Returns `base` with `own_writes` overlaid in order; `base` is untouched.
pub fn merge_read_view(base: &[u8], own_writes: &[WriteRecord]) -> Vec<u8> {
    let mut out = base.to_vec();
    apply_writes(&mut out, own_writes);
    out
}

/// Normalizes a write list: later writes win on overlap, output is sorted by
/// `(block, offset)`, and touching or overlapping ranges inside one block are
/// merged into a single record.
pub fn coalesce_writes(writes: &[WriteRecord]) -> Vec<WriteRecord> {
    // Per block: byte position -> value, last writer wins.
    let mut per_block: BTreeMap<BlockRef, BTreeMap<usize, u8>> = BTreeMap::new();
    for w in writes {
        let bytes = per_block.entry(w.block).or_default();
        for (i, b) in w.bytes.iter().enumerate() {
            bytes.insert(w.offset + i, *b);
        }
    }

    let mut out = Vec::new();
    for (block, bytes) in per_block {
        let mut current: Option<WriteRecord> = None;
        for (pos, b) in bytes {
            match current.as_mut() {
                Some(rec) if rec.end() == pos => rec.bytes.push(b),
                _ => {
                    if let Some(rec) = current.take() {
                        out.push(rec);
                    }
                    current = Some(WriteRecord::new(block, pos, vec![b]));
                }
            }
        }
        out.extend(current);
    }
    out
}

/// Collapses a set of length assertions into an equivalent minimal set:
/// per file at most one `AtLeast` and one `AtMost`, or a single `Exactly`
/// when the predicates pin the length. A contradictory set is kept
/// unsatisfiable.
pub fn normalize_assertions(assertions: &[LengthAssertion]) -> Vec<LengthAssertion> {
    #[derive(Default)]
    struct Bounds {
        lo: Option<u64>,
        hi: Option<u64>,
        exact: Option<u64>,
        contradictory: bool,
    }

    let mut per_file: BTreeMap<FileId, Bounds> = BTreeMap::new();
    for a in assertions {
        let b = per_file.entry(a.file).or_default();
        match a.kind {
            AssertionKind::AtLeast => b.lo = Some(b.lo.map_or(a.length, |l| l.max(a.length))),
            AssertionKind::AtMost => b.hi = Some(b.hi.map_or(a.length, |h| h.min(a.length))),
            AssertionKind::Exactly => match b.exact {
                Some(e) if e != a.length => b.contradictory = true,
                _ => b.exact = Some(a.length),
            },
        }
    }

    let mut out = Vec::new();
    for (file, b) in per_file {
        let lo = b.lo.into_iter().chain(b.exact).max();
        let hi = b.hi.into_iter().chain(b.exact).min();
        let satisfiable = !b.contradictory
            && match (lo, hi) {
                (Some(l), Some(h)) => l <= h,
                _ => true,
            };
        if !satisfiable {
            // An impossible pair: AtLeast above AtMost.
            out.push(LengthAssertion::at_least(file, u64::MAX));
            out.push(LengthAssertion::at_most(file, 0));
            continue;
        }
        match (lo, hi) {
            (Some(l), Some(h)) if l == h => out.push(LengthAssertion::exactly(file, l)),
            (lo, hi) => {
                // lo == 0 is vacuous.
                if let Some(l) = lo.filter(|&l| l > 0) {
                    out.push(LengthAssertion::at_least(file, l));
                }
                if let Some(h) = hi {
                    out.push(LengthAssertion::at_most(file, h));
                }
            }
        }
    }
    out
}
