//! Length-prefixed JSON framing between clients and the backend.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object whose `"t"` field names the message kind. Object keys are emitted
//! in lexicographic order so encodings are byte-stable. Block bytes travel
//! as base64 text.

pub mod b64;
mod message;
pub mod server;
pub mod transport;

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use message::{BeginReply, BlockReply, GcReply, Reply, Request, Response};

pub const HEADER_LEN: usize = 4;

/// Frames larger than this are rejected rather than buffered.
pub const MAX_FRAME_LEN: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedFrame(msg.into())
}

/// Encodes one message as a frame.
pub fn encode<M: Serialize>(msg: &M) -> Vec<u8> {
    // Going through `Value` sorts object keys.
    let value = serde_json::to_value(msg).expect("messages serialize to JSON");
    let body = serde_json::to_vec(&value).expect("JSON values serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses a frame body.
pub fn decode_body<M: DeserializeOwned>(body: &[u8]) -> Result<M, WireError> {
    let text = std::str::from_utf8(body).map_err(|e| malformed(format!("invalid UTF-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    match value.get("t") {
        Some(serde_json::Value::String(_)) => {}
        _ => return Err(malformed("missing message kind")),
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

/// Decodes the first frame in `buf`. `Ok(None)` means more bytes are
/// needed; on success the consumed length is returned alongside the
/// message, and any trailing bytes belong to the next frame.
pub fn decode<M: DeserializeOwned>(buf: &[u8]) -> Result<Option<(M, usize)>, WireError> {
    let Some(header) = buf.get(..HEADER_LEN) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_LEN {
        return Err(malformed(format!("frame of {len} bytes exceeds the limit")));
    }
    let Some(body) = buf.get(HEADER_LEN..HEADER_LEN + len) else {
        return Ok(None);
    };
    Ok(Some((decode_body(body)?, HEADER_LEN + len)))
}

/// Reads one message. `Ok(None)` on a clean end of stream between frames.
pub fn read_message<M: DeserializeOwned, R: Read>(r: &mut R) -> Result<Option<M>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(malformed(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

pub fn write_message<M: Serialize, W: Write>(w: &mut W, msg: &M) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CommitRequest, CommitResult, MetaOp, MetaTarget, ReadEntry};
    use crate::model::{BlockRef, CachePolicy, FileId, LengthAssertion, Timestamp, WriteRecord};
    use proptest::prelude::*;

    #[test]
    fn begin_frame_is_byte_exact() {
        let frame = encode(&Request::Begin {
            since: None,
            policy: None,
        });
        assert_eq!(&frame[..4], &[0, 0, 0, 0x0D]);
        assert_eq!(&frame[4..], br#"{"t":"begin"}"#);
        let (msg, used): (Request, usize) = decode(&frame).unwrap().unwrap();
        assert_eq!(used, frame.len());
        assert_eq!(
            msg,
            Request::Begin {
                since: None,
                policy: None
            }
        );
    }

    #[test]
    fn block_payload_is_base64() {
        let reply = Response::GetBlock(Reply::Ok(BlockReply {
            bytes: vec![0; 1024],
            write_ts: Timestamp(3),
        }));
        let frame = encode(&reply);
        let body: serde_json::Value = serde_json::from_slice(&frame[4..]).unwrap();
        let text = body["ok"]["bytes"].as_str().unwrap();
        // 4 * ceil(n / 3)
        assert_eq!(text.len(), 4 * 1024usize.div_ceil(3));
        assert_eq!(text.len(), 1368);
    }

    #[test]
    fn keys_are_sorted() {
        let frame = encode(&Request::GetBlock {
            block: BlockRef::new(FileId(2), 7),
            at: Timestamp(4),
        });
        assert_eq!(
            std::str::from_utf8(&frame[4..]).unwrap(),
            r#"{"at":4,"block":{"block":7,"file":2},"t":"get_block"}"#
        );
    }

    #[test]
    fn incomplete_frames_wait() {
        let mut frame = vec![0, 0, 0, 5];
        frame.extend_from_slice(b"{\"t\":");
        assert!(decode::<Request>(&frame[..8]).unwrap().is_none());
        assert!(decode::<Request>(&frame[..2]).unwrap().is_none());
    }

    #[test]
    fn unknown_kind_is_malformed() {
        let body = br#"{"t":"nope"}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        assert!(matches!(decode::<Request>(&frame), Err(WireError::MalformedFrame(_))));
        let no_kind = br#"{"x":1}"#;
        assert!(matches!(decode_body::<Request>(no_kind), Err(WireError::MalformedFrame(_))));
        assert!(matches!(decode_body::<Request>(&[0xff, 0xfe]), Err(WireError::MalformedFrame(_))));
    }

    #[test]
    fn error_replies_round_trip() {
        let r = Response::GetBlock(Reply::Err("SnapshotTooOld".into()));
        let frame = encode(&r);
        assert_eq!(
            std::str::from_utf8(&frame[4..]).unwrap(),
            r#"{"err":"SnapshotTooOld","t":"get_block"}"#
        );
        let (back, _): (Response, usize) = decode(&frame).unwrap().unwrap();
        assert_eq!(back, r);
        let none = Response::GetMeta(Reply::Ok(None));
        let (back, _): (Response, usize) = decode(&encode(&none)).unwrap().unwrap();
        assert_eq!(back, none);
    }

    fn sample_requests() -> Vec<Request> {
        let f = FileId(9);
        vec![
            Request::Begin {
                since: Some(Timestamp(3)),
                policy: Some(CachePolicy::Frequency),
            },
            Request::GetMeta {
                target: MetaTarget::Path("/a/b".into()),
                at: Timestamp(1),
            },
            Request::GetMeta {
                target: MetaTarget::Id(f),
                at: Timestamp(1),
            },
            Request::ListDir {
                path: "/".into(),
                at: Timestamp(0),
            },
            Request::Commit {
                request: CommitRequest {
                    read_set: vec![ReadEntry {
                        block: BlockRef::new(f, 1),
                        ts: Timestamp(2),
                    }],
                    write_set: vec![WriteRecord::new(BlockRef::new(f, 1), 3, b"xyz".to_vec())],
                    meta_reads: vec![],
                    meta_ops: vec![
                        MetaOp::Create {
                            path: "/n".into(),
                            file: FileId::provisional(1),
                            mode: 0o644,
                        },
                        MetaOp::Extend { file: f, length: 9 },
                    ],
                    assertions: vec![LengthAssertion::exactly(f, 100)],
                    read_ts: Timestamp(2),
                },
            },
            Request::Feed {
                since: Timestamp(0),
                policy: CachePolicy::Stale,
            },
            Request::Gc {
                retain_after: Timestamp(5),
            },
            Request::Dump { full: true },
        ]
    }

    #[test]
    fn requests_round_trip_and_pipeline() {
        let msgs = sample_requests();
        let mut stream = Vec::new();
        for m in &msgs {
            let frame = encode(m);
            let (back, used): (Request, usize) = decode(&frame).unwrap().unwrap();
            assert_eq!(&back, m);
            assert_eq!(used, frame.len());
            stream.extend(frame);
        }
        let mut pos = 0;
        let mut decoded = Vec::new();
        while let Some((m, used)) = decode::<Request>(&stream[pos..]).unwrap() {
            decoded.push(m);
            pos += used;
        }
        assert_eq!(decoded, msgs);
        let mut cursor = std::io::Cursor::new(stream);
        let mut read_back = Vec::new();
        while let Some(m) = read_message::<Request, _>(&mut cursor).unwrap() {
            read_back.push(m);
        }
        assert_eq!(read_back, msgs);
    }

    #[test]
    fn commit_results_round_trip() {
        for r in [
            CommitResult::Committed(Timestamp(4)),
            CommitResult::Aborted(crate::backend::AbortReason::StaleRead(BlockRef::new(FileId(3), 2))),
            CommitResult::Aborted(crate::backend::AbortReason::SnapshotTooOld),
        ] {
            let msg = Response::Commit(Reply::Ok(r));
            let (back, _): (Response, usize) = decode(&encode(&msg)).unwrap().unwrap();
            assert_eq!(back, msg);
        }
    }

    proptest! {
        #[test]
        fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode::<Request>(&bytes);
            let _ = decode::<Response>(&bytes);
        }

        #[test]
        fn framed_garbage_is_malformed(body in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut frame = (body.len() as u32).to_be_bytes().to_vec();
            frame.extend_from_slice(&body);
            // Random bodies almost never form a valid message; either way
            // decoding must terminate with a verdict.
            match decode::<Request>(&frame) {
                Ok(Some((_, used))) => prop_assert_eq!(used, frame.len()),
                Ok(None) => prop_assert!(false, "complete frame reported incomplete"),
                Err(WireError::MalformedFrame(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn write_payloads_round_trip(
            bytes in proptest::collection::vec(any::<u8>(), 1..200),
            off in 0usize..100,
            since in 0u64..1000,
        ) {
            let msg = Request::Commit { request: CommitRequest {
                write_set: vec![WriteRecord::new(BlockRef::new(FileId(2), 0), off, bytes)],
                read_ts: Timestamp(since),
                ..Default::default()
            }};
            let (back, _): (Request, usize) = decode(&encode(&msg)).unwrap().unwrap();
            prop_assert_eq!(back, msg);
        }
    }
}
