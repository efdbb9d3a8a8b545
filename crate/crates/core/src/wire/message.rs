use serde::{Deserialize, Serialize};

use crate::backend::{
    CacheUpdateBatch, CommitRequest, CommitResult, DirEntry, MetaTarget, Snapshot,
};
use crate::model::{BlockRef, CachePolicy, FileMeta, Timestamp};

/// Client to backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    /// Sample a read timestamp; with `since` and `policy`, also fetch the
    /// cache feed up to it.
    Begin {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        since: Option<Timestamp>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<CachePolicy>,
    },
    GetBlock {
        block: BlockRef,
        at: Timestamp,
    },
    GetMeta {
        target: MetaTarget,
        at: Timestamp,
    },
    ListDir {
        path: String,
        at: Timestamp,
    },
    Commit {
        request: CommitRequest,
    },
    Feed {
        since: Timestamp,
        policy: CachePolicy,
    },
    Gc {
        retain_after: Timestamp,
    },
    Dump {
        #[serde(default)]
        full: bool,
    },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Begin { .. } => "begin",
            Request::GetBlock { .. } => "get_block",
            Request::GetMeta { .. } => "get_meta",
            Request::ListDir { .. } => "list_dir",
            Request::Commit { .. } => "commit",
            Request::Feed { .. } => "feed",
            Request::Gc { .. } => "gc",
            Request::Dump { .. } => "dump",
        }
    }

    /// True for requests that change backend state.
    pub fn is_mutation(&self) -> bool {
        matches!(self, Request::Commit { .. } | Request::Gc { .. })
    }
}

/// Either a result or an error reason from the backend error taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply<T> {
    Ok(T),
    Err(String),
}

impl<T> Reply<T> {
    pub fn into_result(self) -> Result<T, String> {
        match self {
            Reply::Ok(v) => Ok(v),
            Reply::Err(e) => Err(e),
        }
    }
}

impl<T, E: std::fmt::Display> From<Result<T, E>> for Reply<T> {
    fn from(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Reply::Ok(v),
            Err(e) => Reply::Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeginReply {
    pub read_ts: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feed: Option<CacheUpdateBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReply {
    #[serde(with = "super::b64")]
    pub bytes: Vec<u8>,
    pub write_ts: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcReply {
    pub pruned: usize,
}

/// Backend to client. The kind mirrors the request it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum Response {
    Begin(Reply<BeginReply>),
    GetBlock(Reply<BlockReply>),
    GetMeta(Reply<Option<FileMeta>>),
    ListDir(Reply<Vec<DirEntry>>),
    Commit(Reply<CommitResult>),
    Feed(Reply<CacheUpdateBatch>),
    Gc(Reply<GcReply>),
    Dump(Reply<Snapshot>),
}

impl Response {
    pub fn kind(&self) -> &'static str {
        match self {
            Response::Begin(_) => "begin",
            Response::GetBlock(_) => "get_block",
            Response::GetMeta(_) => "get_meta",
            Response::ListDir(_) => "list_dir",
            Response::Commit(_) => "commit",
            Response::Feed(_) => "feed",
            Response::Gc(_) => "gc",
            Response::Dump(_) => "dump",
        }
    }
}
