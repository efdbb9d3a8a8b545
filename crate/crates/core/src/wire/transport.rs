//! Request/response transports and a typed call surface over them.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::message::{BeginReply, BlockReply, Reply, Request, Response};
use super::server::dispatch;
use super::{decode, encode, read_message, write_message, WireError};
use crate::backend::{
    Backend, BackendError, CacheUpdateBatch, CommitRequest, CommitResult, DirEntry, MetaTarget,
    Snapshot,
};
use crate::model::{BlockRef, CachePolicy, FileMeta, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connection error: {0}")]
    Io(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("response kind {got} does not answer {sent}")]
    Unexpected { sent: &'static str, got: &'static str },
    #[error("injected fault: {0}")]
    Injected(&'static str),
}

impl From<WireError> for TransportError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::MalformedFrame(m) => TransportError::Malformed(m),
            WireError::Io(e) => TransportError::Io(e.to_string()),
        }
    }
}

/// One request, one response.
pub trait Transport: Send + Sync {
    fn call(&self, req: Request) -> Result<Response, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn unwrap_reply<T>(reply: Reply<T>) -> Result<T, CallError> {
    reply
        .into_result()
        .map_err(|reason| CallError::Backend(BackendError::from_reason(&reason)))
}

macro_rules! expect_kind {
    ($resp:expr, $sent:expr, $variant:path) => {
        match $resp {
            $variant(reply) => unwrap_reply(reply),
            other => Err(CallError::Transport(TransportError::Unexpected {
                sent: $sent,
                got: other.kind(),
            })),
        }
    };
}

/// Typed backend operations over any transport.
pub trait BackendApi {
    fn begin(&self, feed: Option<(Timestamp, CachePolicy)>) -> Result<BeginReply, CallError>;
    fn get_block(&self, block: BlockRef, at: Timestamp) -> Result<(Vec<u8>, Timestamp), CallError>;
    fn get_meta(&self, target: MetaTarget, at: Timestamp) -> Result<Option<FileMeta>, CallError>;
    fn list_dir(&self, path: &str, at: Timestamp) -> Result<Vec<DirEntry>, CallError>;
    fn commit(&self, request: CommitRequest) -> Result<CommitResult, CallError>;
    fn feed(&self, since: Timestamp, policy: CachePolicy) -> Result<CacheUpdateBatch, CallError>;
    fn gc(&self, retain_after: Timestamp) -> Result<usize, CallError>;
    fn dump(&self, full: bool) -> Result<Snapshot, CallError>;
}

impl<T: Transport + ?Sized> BackendApi for T {
    fn begin(&self, feed: Option<(Timestamp, CachePolicy)>) -> Result<BeginReply, CallError> {
        let req = Request::Begin {
            since: feed.map(|f| f.0),
            policy: feed.map(|f| f.1),
        };
        expect_kind!(self.call(req)?, "begin", Response::Begin)
    }

    fn get_block(&self, block: BlockRef, at: Timestamp) -> Result<(Vec<u8>, Timestamp), CallError> {
        let r: BlockReply = expect_kind!(
            self.call(Request::GetBlock { block, at })?,
            "get_block",
            Response::GetBlock
        )?;
        Ok((r.bytes, r.write_ts))
    }

    fn get_meta(&self, target: MetaTarget, at: Timestamp) -> Result<Option<FileMeta>, CallError> {
        expect_kind!(self.call(Request::GetMeta { target, at })?, "get_meta", Response::GetMeta)
    }

    fn list_dir(&self, path: &str, at: Timestamp) -> Result<Vec<DirEntry>, CallError> {
        let req = Request::ListDir {
            path: path.to_string(),
            at,
        };
        expect_kind!(self.call(req)?, "list_dir", Response::ListDir)
    }

    fn commit(&self, request: CommitRequest) -> Result<CommitResult, CallError> {
        expect_kind!(self.call(Request::Commit { request })?, "commit", Response::Commit)
    }

    fn feed(&self, since: Timestamp, policy: CachePolicy) -> Result<CacheUpdateBatch, CallError> {
        expect_kind!(self.call(Request::Feed { since, policy })?, "feed", Response::Feed)
    }

    fn gc(&self, retain_after: Timestamp) -> Result<usize, CallError> {
        let r = expect_kind!(self.call(Request::Gc { retain_after })?, "gc", Response::Gc)?;
        Ok(r.pruned)
    }

    fn dump(&self, full: bool) -> Result<Snapshot, CallError> {
        expect_kind!(self.call(Request::Dump { full })?, "dump", Response::Dump)
    }
}

/// In-process backend. With `codec` set, every message is encoded and
/// decoded as it would be on a socket.
pub struct Embedded {
    backend: Arc<Backend>,
    codec: bool,
}

impl Embedded {
    pub fn new(backend: Arc<Backend>) -> Self {
        Embedded {
            backend,
            codec: false,
        }
    }

    pub fn with_codec(backend: Arc<Backend>) -> Self {
        Embedded {
            backend,
            codec: true,
        }
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }
}

fn through_codec<M: serde::Serialize + serde::de::DeserializeOwned>(m: &M) -> Result<M, TransportError> {
    match decode::<M>(&encode(m))? {
        Some((m, _)) => Ok(m),
        None => Err(TransportError::Malformed("frame did not decode".into())),
    }
}

impl Transport for Embedded {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        if self.codec {
            let req = through_codec(&req)?;
            through_codec(&dispatch(&self.backend, req))
        } else {
            Ok(dispatch(&self.backend, req))
        }
    }
}

/// TCP client. Holds a small pool of connections so concurrent callers do
/// not queue behind one another.
pub struct TcpTransport {
    addr: std::net::SocketAddr,
    idle: Mutex<Vec<Conn>>,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn open(addr: std::net::SocketAddr) -> std::io::Result<Conn> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpTransport, TransportError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| TransportError::Io(e.to_string()))?
            .next()
            .ok_or_else(|| TransportError::Io("address did not resolve".into()))?;
        let first = Conn::open(addr).map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(TcpTransport {
            addr,
            idle: Mutex::new(vec![first]),
        })
    }
}

impl Transport for TcpTransport {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        let pooled = self.idle.lock().pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => Conn::open(self.addr).map_err(|e| TransportError::Io(e.to_string()))?,
        };
        // A connection that failed mid-call is dropped, not returned.
        write_message(&mut conn.writer, &req).map_err(|e| TransportError::Io(e.to_string()))?;
        let resp = read_message::<Response, _>(&mut conn.reader)?
            .ok_or_else(|| TransportError::Io("connection closed".into()))?;
        self.idle.lock().push(conn);
        Ok(resp)
    }
}

/// Logs every request kind passing through.
pub struct Recording {
    inner: Arc<dyn Transport>,
    log: Arc<Mutex<Vec<&'static str>>>,
}

impl Recording {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        Recording {
            inner,
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// A recorder in front of `inner` that appends to `other`'s log.
    pub fn sharing(other: &Recording, inner: Arc<dyn Transport>) -> Self {
        Recording {
            inner,
            log: Arc::clone(&other.log),
        }
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.log.lock().clone()
    }

    pub fn count(&self) -> usize {
        self.log.lock().len()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.log.lock().iter().filter(|k| **k == kind).count()
    }

    pub fn clear(&self) {
        self.log.lock().clear();
    }
}

impl Transport for Recording {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        self.log.lock().push(req.kind());
        self.inner.call(req)
    }
}

/// Fails a fraction of commit calls, either before the request reaches the
/// backend or after it was applied with the reply lost.
pub struct Faulty {
    inner: Arc<dyn Transport>,
    rng: Mutex<ChaCha8Rng>,
    probability: f64,
    dropped_requests: AtomicU64,
    lost_replies: AtomicU64,
}

impl Faulty {
    pub fn new(inner: Arc<dyn Transport>, probability: f64, seed: u64) -> Self {
        Faulty {
            inner,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            probability,
            dropped_requests: AtomicU64::new(0),
            lost_replies: AtomicU64::new(0),
        }
    }

    pub fn dropped_requests(&self) -> u64 {
        self.dropped_requests.load(Ordering::Relaxed)
    }

    pub fn lost_replies(&self) -> u64 {
        self.lost_replies.load(Ordering::Relaxed)
    }
}

impl Transport for Faulty {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        if !matches!(req, Request::Commit { .. }) {
            return self.inner.call(req);
        }
        let (fail, after) = {
            let mut rng = self.rng.lock();
            (rng.random_bool(self.probability), rng.random_bool(0.5))
        };
        if !fail {
            return self.inner.call(req);
        }
        if after {
            self.inner.call(req)?;
            self.lost_replies.fetch_add(1, Ordering::Relaxed);
            Err(TransportError::Injected("reply lost"))
        } else {
            self.dropped_requests.fetch_add(1, Ordering::Relaxed);
            Err(TransportError::Injected("request dropped"))
        }
    }
}

/// Adds a fixed delay to every call. A zero delay still yields the thread,
/// so concurrent clients interleave even on a single core.
pub struct Delayed {
    inner: Arc<dyn Transport>,
    delay: Duration,
}

impl Delayed {
    pub fn new(inner: Arc<dyn Transport>, delay: Duration) -> Self {
        Delayed { inner, delay }
    }
}

impl Transport for Delayed {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        if self.delay.is_zero() {
            std::thread::yield_now();
        } else {
            std::thread::sleep(self.delay);
        }
        self.inner.call(req)
    }
}
