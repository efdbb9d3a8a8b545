//! Workload generation, metrics and history checking.
//!
//! [`run_workload`] drives a contended hot-block workload from many clients
//! against one backend and records every transaction in a [`History`];
//! [`check_strict_serializability`] replays that history serially and
//! reports the first anomaly; [`compare_modes`] repeats a run under each
//! versioning mode.

mod checker;
mod history;
mod metrics;
pub mod mutations;
mod workload;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, Snapshot};
use crate::client::FsError;
use crate::model::{CachePolicy, VersioningMode, DEFAULT_BLOCK_SIZE};
use crate::wire::transport::{Embedded, Transport, TransportError};

pub use checker::{check_strict_serializability, replay_oracle, CheckError, Verdict, Witness};
pub use history::{Event, EventKind, History, TrackedFile, SETUP_CLIENT};
pub use metrics::{abort_rate, plot_csv, ClientStats, Metrics, Percentiles, PhaseLatency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// One OS thread per client, real sleeps.
    #[default]
    Threads,
    /// All clients on the calling thread, one operation at a time, in an
    /// order drawn from the seed. Think time is skipped and the clock is a
    /// step counter, so the whole history is a function of the config.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub clients: usize,
    /// How many of `clients` only read (the last ones).
    pub read_only_clients: usize,
    /// Run length when `txns` is unset.
    pub duration_secs: f64,
    /// Total transaction attempts across clients.
    pub txns: Option<u64>,
    pub file_size: u64,
    pub block_size: usize,
    pub hot_block_count: u64,
    pub hot_probability: f64,
    pub think_time_ms: f64,
    pub mode: VersioningMode,
    pub policy: CachePolicy,
    pub seed: u64,
    pub undo_window: u64,
    /// Added to every client request (embedded runs only).
    pub net_delay_us: u64,
    pub scheduler: Scheduler,
    /// Write a random sub-range of the chosen block instead of all of it.
    pub partial_writes: bool,
    /// Chance that a writer also appends a record to a shared log file.
    pub append_probability: f64,
    /// Take byte-range locks around reads and writes.
    pub locks: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            clients: 32,
            read_only_clients: 0,
            duration_secs: 10.0,
            txns: None,
            file_size: 1 << 20,
            block_size: DEFAULT_BLOCK_SIZE,
            hot_block_count: 20,
            hot_probability: 0.2,
            think_time_ms: 10.0,
            mode: VersioningMode::BlockVersioned,
            policy: CachePolicy::InvalidateOnly,
            seed: 0,
            undo_window: 1024,
            net_delay_us: 0,
            scheduler: Scheduler::Threads,
            partial_writes: false,
            append_probability: 0.0,
            locks: true,
        }
    }
}

impl WorkloadConfig {
    pub fn blocks(&self) -> u64 {
        self.file_size.div_ceil(self.block_size.max(1) as u64)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.clients == 0 {
            return bad("clients must be positive");
        }
        if self.read_only_clients > self.clients {
            return bad("read_only_clients exceeds clients");
        }
        if self.block_size == 0 || self.file_size < self.block_size as u64 {
            return bad("file_size must hold at least one block");
        }
        if self.hot_block_count > self.blocks() {
            return bad("hot_block_count exceeds file_size/block_size");
        }
        if !(0.0..=1.0).contains(&self.hot_probability) || !(0.0..=1.0).contains(&self.append_probability) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.txns.is_none() && !(self.duration_secs > 0.0) {
            return bad("set txns or a positive duration");
        }
        if self.think_time_ms < 0.0 {
            return bad("think_time_ms must be non-negative");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WorkloadConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Backend settings matching this workload.
    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            block_size: self.block_size,
            undo_window: self.undo_window,
            ..BackendConfig::with_mode(self.mode)
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad workload config: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("client {client}: {error}")]
    Client { client: u32, error: FsError },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub history: History,
    /// Backend state after the run.
    pub dump: Snapshot,
}

impl RunOutput {
    /// Checks the history and, for a fresh backend, that the final state
    /// equals the serial replay.
    pub fn verify(&self) -> Result<(), String> {
        match check_strict_serializability(&self.history) {
            Ok(Verdict::Valid) => {}
            Ok(Verdict::Violation(w)) => return Err(format!("violation: {w}")),
            Err(e) => return Err(e.to_string()),
        }
        let oracle = replay_oracle(&self.history, false).map_err(|e| e.to_string())?;
        if oracle.digest() != self.dump.digest() {
            return Err(format!(
                "final state {} differs from serial replay {}",
                self.dump.digest(),
                oracle.digest()
            ));
        }
        Ok(())
    }
}

/// Runs the workload against a fresh in-process backend.
pub fn run_workload(config: &WorkloadConfig) -> Result<RunOutput, HarnessError> {
    let backend = Arc::new(Backend::new(config.backend_config()));
    run_workload_on(config, &|| Ok(Arc::new(Embedded::new(Arc::clone(&backend))) as Arc<dyn Transport>))
}

/// Runs the workload with each client connected through `connect`.
pub fn run_workload_on(
    config: &WorkloadConfig,
    connect: &(dyn Fn() -> Result<Arc<dyn Transport>, HarnessError> + Sync),
) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    workload::run(config, connect)
}

/// One run per versioning mode, same seed and clients.
pub fn compare_modes(base: &WorkloadConfig) -> Result<Vec<RunOutput>, HarnessError> {
    VersioningMode::ALL
        .into_iter()
        .map(|mode| {
            run_workload(&WorkloadConfig {
                mode,
                ..base.clone()
            })
        })
        .collect()
}
