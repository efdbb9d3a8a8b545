//! Serves the backend over TCP, one thread per connection.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::message::{BeginReply, BlockReply, GcReply, Reply, Request, Response};
use super::{read_message, write_message, WireError};
use crate::backend::Backend;

/// Executes one request against the backend.
pub fn dispatch(backend: &Backend, req: Request) -> Response {
    match req {
        Request::Begin { since, policy } => {
            let feed = match (since, policy) {
                (Some(s), Some(p)) => Some((s, p)),
                (None, None) => None,
                _ => {
                    return Response::Begin(Reply::Err(
                        "Protocol: begin needs both since and policy, or neither".into(),
                    ))
                }
            };
            let (read_ts, feed) = backend.begin(feed);
            Response::Begin(Reply::Ok(BeginReply { read_ts, feed }))
        }
        Request::GetBlock { block, at } => Response::GetBlock(
            backend
                .get_block(block, at)
                .map(|(bytes, write_ts)| BlockReply { bytes, write_ts })
                .into(),
        ),
        Request::GetMeta { target, at } => Response::GetMeta(backend.get_meta(&target, at).into()),
        Request::ListDir { path, at } => Response::ListDir(backend.list_dir(&path, at).into()),
        Request::Commit { request } => Response::Commit(backend.validate_and_commit(&request).into()),
        Request::Feed { since, policy } => {
            Response::Feed(Reply::Ok(backend.cache_feed(since, policy)))
        }
        Request::Gc { retain_after } => Response::Gc(Reply::Ok(GcReply {
            pruned: backend.gc_undo(retain_after),
        })),
        Request::Dump { full } => Response::Dump(Reply::Ok(backend.dump(full))),
    }
}

pub struct Server {
    listener: TcpListener,
    backend: Arc<Backend>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, backend: Arc<Backend>) -> std::io::Result<Server> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            backend,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> std::io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let backend = Arc::clone(&self.backend);
            std::thread::spawn(move || {
                let _ = serve_connection(stream, &backend);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<std::io::Result<()>> {
        std::thread::spawn(move || self.run())
    }
}

/// Answers requests until the peer disconnects. A malformed frame ends the
/// connection.
pub fn serve_connection(stream: TcpStream, backend: &Backend) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(req) = read_message::<Request, _>(&mut reader)? {
        let resp = dispatch(backend, req);
        write_message(&mut writer, &resp)?;
    }
    Ok(())
}
