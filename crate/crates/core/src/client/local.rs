//! A transaction's private view of one regular file.
//!
//! The view is layered: snapshot bytes at the read timestamp, then zeros
//! from the lowest truncation point, then the transaction's own writes in
//! order. The backend applies a commit in the same order (length changes,
//! tail zeroing, writes), so the committed file equals this view.

use std::collections::BTreeMap;

use crate::model::{block_span, FileId, LengthAssertion, Span, WriteRecord};

#[derive(Debug, Clone)]
pub(crate) struct LocalFile {
    /// Length at the snapshot (0 for files created here).
    pub base_len: u64,
    /// Length set by the latest truncate, which makes the length
    /// independent of the snapshot.
    pub exact: Option<u64>,
    /// Furthest write end since the latest truncate.
    pub grown: u64,
    /// Bytes at or past this offset no longer come from the snapshot.
    pub zero_from: Option<u64>,
    /// Own writes per block, in issue order.
    pub writes: BTreeMap<u64, Vec<WriteRecord>>,
    pub removed: bool,
}

impl LocalFile {
    pub fn existing(base_len: u64) -> Self {
        LocalFile {
            base_len,
            exact: None,
            grown: 0,
            zero_from: None,
            writes: BTreeMap::new(),
            removed: false,
        }
    }

    pub fn created() -> Self {
        LocalFile {
            exact: Some(0),
            zero_from: Some(0),
            ..LocalFile::existing(0)
        }
    }

    pub fn len(&self) -> u64 {
        self.exact.unwrap_or(self.base_len).max(self.grown)
    }

    /// What must hold of the committed length for `len()` to stay the
    /// answer. `None` when the length no longer depends on it.
    pub fn length_observation(&self, file: FileId) -> Option<LengthAssertion> {
        if self.exact.is_some() {
            None
        } else if self.grown >= self.base_len {
            Some(LengthAssertion::at_most(file, self.grown))
        } else {
            Some(LengthAssertion::exactly(file, self.base_len))
        }
    }

    /// The assertion implied by a read of `count > 0` bytes at `offset`.
    pub fn read_assertion(&self, file: FileId, offset: u64, count: u64) -> Option<LengthAssertion> {
        if self.exact.is_some() {
            return None;
        }
        let len = self.len();
        let end = offset.saturating_add(count);
        if offset >= len {
            // Nothing returned: the file must not reach past the offset.
            Some(LengthAssertion::at_most(file, offset))
        } else if end <= len {
            (self.grown < end).then(|| LengthAssertion::at_least(file, end))
        } else {
            self.length_observation(file)
        }
    }

    pub fn write(&mut self, block_size: usize, offset: u64, bytes: &[u8]) {
        let mut done = 0;
        for s in block_span(offset, bytes.len() as u64, block_size) {
            self.writes.entry(s.block).or_default().push(WriteRecord::new(
                crate::model::BlockRef::new(FileId(0), s.block),
                s.offset,
                bytes[done..done + s.len].to_vec(),
            ));
            done += s.len;
        }
        self.grown = self.grown.max(offset + bytes.len() as u64);
    }

    pub fn truncate(&mut self, block_size: usize, length: u64) {
        self.exact = Some(length);
        self.grown = 0;
        self.zero_from = Some(self.zero_from.map_or(length, |z| z.min(length)));
        let bs = block_size as u64;
        self.writes.retain(|&block, recs| {
            let start = block * bs;
            recs.retain_mut(|w| {
                let w_start = start + w.offset as u64;
                if w_start >= length {
                    return false;
                }
                let keep = (length - w_start).min(w.bytes.len() as u64) as usize;
                w.bytes.truncate(keep);
                true
            });
            !recs.is_empty()
        });
    }

    /// True when some byte of the span still comes from the snapshot.
    pub fn needs_base(&self, block_size: usize, span: Span) -> bool {
        let start = span.block * block_size as u64;
        let zero = self
            .zero_from
            .map_or(span.offset + span.len, |z| z.saturating_sub(start).min(usize::MAX as u64) as usize);
        let limit = zero.min(span.offset + span.len);
        if limit <= span.offset {
            return false;
        }
        let mut covered = vec![false; limit - span.offset];
        if let Some(recs) = self.writes.get(&span.block) {
            for w in recs {
                let lo = w.offset.max(span.offset);
                let hi = w.end().min(limit);
                for c in covered.iter_mut().take(hi.saturating_sub(span.offset)).skip(lo.saturating_sub(span.offset)) {
                    *c = true;
                }
            }
        }
        covered.iter().any(|c| !c)
    }

    /// True when the block's final content is known without the snapshot.
    pub fn fully_determined(&self, block_size: usize, block: u64) -> bool {
        !self.needs_base(
            block_size,
            Span {
                block,
                offset: 0,
                len: block_size,
            },
        )
    }

    /// The block as this transaction sees it.
    pub fn view(&self, block_size: usize, block: u64, base: Option<&[u8]>) -> Vec<u8> {
        let mut out = match base {
            Some(b) => b.to_vec(),
            None => vec![0; block_size],
        };
        if let Some(z) = self.zero_from {
            let start = block * block_size as u64;
            if z < start + block_size as u64 {
                let from = z.saturating_sub(start) as usize;
                out[from..].fill(0);
            }
        }
        if let Some(recs) = self.writes.get(&block) {
            crate::model::apply_writes(&mut out, recs);
        }
        out
    }

    pub fn has_writes(&self) -> bool {
        !self.writes.is_empty()
    }

    /// Own writes addressed to `file`, in issue order per block.
    pub fn write_records(&self, file: FileId) -> Vec<WriteRecord> {
        self.writes
            .iter()
            .flat_map(|(&block, recs)| {
                recs.iter().map(move |w| {
                    WriteRecord::new(crate::model::BlockRef::new(file, block), w.offset, w.bytes.clone())
                })
            })
            .collect()
    }

    pub fn max_write_end(&self, block_size: usize) -> Option<u64> {
        self.writes
            .iter()
            .flat_map(|(&block, recs)| recs.iter().map(move |w| block * block_size as u64 + w.end() as u64))
            .max()
    }
}
