//! Cache update batches built from the transaction log.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::types::{CacheItem, CacheUpdateBatch};
use super::State;
use crate::model::{BlockRef, CachePolicy};

/// Smallest fetch count that still ranks in the top `fraction` of blocks.
/// `u64::MAX` when nothing qualifies.
pub(super) fn hot_threshold(counts: &HashMap<BlockRef, u64>, fraction: f64) -> u64 {
    let mut sorted: Vec<u64> = counts.values().copied().filter(|&c| c > 0).collect();
    if sorted.is_empty() || fraction <= 0.0 {
        return u64::MAX;
    }
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let k = ((sorted.len() as f64) * fraction.min(1.0)).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

pub(super) fn build(
    state: &State,
    since: crate::model::Timestamp,
    policy: CachePolicy,
    frequency: Option<(u64, &HashMap<BlockRef, u64>)>,
) -> CacheUpdateBatch {
    if policy == CachePolicy::Stale {
        return CacheUpdateBatch {
            upto: since,
            items: Vec::new(),
        };
    }
    let upto = state.current;
    if since >= upto {
        return CacheUpdateBatch {
            upto,
            items: Vec::new(),
        };
    }
    if since < state.log_start {
        // The log no longer covers the gap; drop whole files.
        let mut ids: Vec<_> = state.inodes.keys().copied().collect();
        ids.sort_unstable();
        return CacheUpdateBatch {
            upto,
            items: ids.into_iter().map(CacheItem::FileInvalidate).collect(),
        };
    }

    let mut removed = BTreeSet::new();
    let mut changed = BTreeSet::new();
    for rec in state.log.iter().filter(|r| r.ts > since) {
        removed.extend(rec.removed.iter().copied());
        changed.extend(rec.blocks.iter().copied());
    }

    let mut items: Vec<CacheItem> = removed.iter().copied().map(CacheItem::FileInvalidate).collect();
    let mut by_file: BTreeMap<_, Vec<BlockRef>> = BTreeMap::new();
    for r in changed {
        if !removed.contains(&r.file) {
            by_file.entry(r.file).or_default().push(r);
        }
    }
    for r in by_file.into_values().flatten() {
        let ship = match policy {
            CachePolicy::UpdateAll => true,
            CachePolicy::Frequency => frequency
                .and_then(|(threshold, counts)| counts.get(&r).map(|&c| c > 0 && c >= threshold))
                .unwrap_or(false),
            _ => false,
        };
        let cell = state.blocks.get(&r.file).and_then(|m| m.get(&r.block));
        match cell {
            Some(cell) if ship => match cell.current() {
                Some(bytes) => items.push(CacheItem::BlockData {
                    block: r,
                    bytes: bytes.clone(),
                    write_ts: cell.write_ts(),
                }),
                None => items.push(CacheItem::BlockInvalidate(r)),
            },
            _ => items.push(CacheItem::BlockInvalidate(r)),
        }
    }
    CacheUpdateBatch { upto, items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FileId;

    #[test]
    fn threshold_picks_top_fraction() {
        let mut counts = HashMap::new();
        for i in 0..10u64 {
            counts.insert(BlockRef::new(FileId(2), i), i + 1);
        }
        // Top 20% of ten blocks is the two with counts 10 and 9.
        assert_eq!(hot_threshold(&counts, 0.2), 9);
        assert_eq!(hot_threshold(&counts, 1.0), 1);
        assert_eq!(hot_threshold(&HashMap::new(), 0.2), u64::MAX);
        assert_eq!(hot_threshold(&counts, 0.0), u64::MAX);
    }
}
