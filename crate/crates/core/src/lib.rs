//! A transactional shared file system engine.
//!
//! Clients run POSIX-like file operations inside transactions. Reads are
//! served from a local block cache or from the backend at the transaction's
//! read timestamp; writes are buffered locally and shipped at commit, where
//! the backend validates the transaction's read footprint optimistically and
//! either applies it under a fresh commit timestamp or aborts it. The result
//! is strict serializability without any lock traffic.
//!
//! - [`model`]: shared types and block arithmetic.
//! - [`backend`]: the versioned block store and commit validator.
//! - [`client`]: mounts, transactions and the file API.
//! - [`wire`]: framing, messages, transports and the TCP server.
//! - [`harness`]: workload generation, metrics and the history checker.
//! - [`cli`]: the `txnfs` command line.

pub mod backend;
pub mod cli;
pub mod client;
pub mod harness;
pub mod model;
pub mod path;
pub mod wire;
