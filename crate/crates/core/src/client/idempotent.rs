//! Exactly-once execution over an unreliable connection.
//!
//! The transaction writes a marker file keyed by the caller. Its existence
//! at the start of an attempt means an earlier attempt committed, even if
//! that attempt's reply never arrived.

use super::{FsError, Mount, OpenFlags, Txn};
use crate::backend::CommitResult;

pub const MARKER_DIR: &str = "/.txn_markers";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdempotentOutcome<R> {
    /// `work` ran in the attempt that committed.
    Executed(R),
    /// An earlier attempt had already committed.
    Skipped,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key != "." && key != ".." && !key.contains('/')
}

impl Mount {
    /// Runs `work` inside a transaction at most once per `key`, retrying
    /// aborts and lost replies. `work` may run several times, but only one
    /// of its transactions commits.
    pub fn run_idempotent<R, F>(&self, key: &str, mut work: F) -> Result<IdempotentOutcome<R>, FsError>
    where
        F: FnMut(&mut Txn) -> Result<R, FsError>,
    {
        if !valid_key(key) {
            return Err(FsError::InvalidArgument(format!("bad idempotency key {key:?}")));
        }
        let marker = format!("{MARKER_DIR}/{key}");
        let limit = self.config().retry_limit.max(1);
        for _ in 0..limit {
            match self.attempt(&marker, &mut work) {
                Ok(Some(out)) => return Ok(out),
                Ok(None) => {}
                Err(FsError::Aborted(_) | FsError::Transport(_) | FsError::Indeterminate(_)) => {}
                // Losing a race to create the marker directory is a conflict too.
                Err(FsError::AlreadyExists(p)) if p == MARKER_DIR => {}
                Err(e) => return Err(e),
            }
        }
        Err(FsError::RetriesExhausted(limit))
    }

    fn attempt<R, F>(&self, marker: &str, work: &mut F) -> Result<Option<IdempotentOutcome<R>>, FsError>
    where
        F: FnMut(&mut Txn) -> Result<R, FsError>,
    {
        let mut txn = self.begin()?;
        if txn.exists(marker)? {
            txn.abort();
            return Ok(Some(IdempotentOutcome::Skipped));
        }
        if !txn.exists(MARKER_DIR)? {
            txn.mkdir(MARKER_DIR, 0o755)?;
        }
        let result = match work(&mut txn) {
            Ok(r) => r,
            Err(e) => {
                txn.abort();
                return Err(e);
            }
        };
        let fd = txn.open(marker, OpenFlags::WRITE | OpenFlags::CREATE | OpenFlags::EXCL, 0o644)?;
        txn.close(fd)?;
        match txn.commit()? {
            CommitResult::Committed(_) => Ok(Some(IdempotentOutcome::Executed(result))),
            CommitResult::Aborted(_) => Ok(None),
        }
    }
}
