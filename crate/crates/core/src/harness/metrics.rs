//! Run metrics. Clients accumulate into their own [`ClientStats`]; the
//! runner merges them once at the end.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50_us: f64,
    pub p99_us: f64,
    pub samples: usize,
}

impl Percentiles {
    /// Nearest-rank percentiles over microsecond samples.
    pub fn of(samples: &mut [f64]) -> Percentiles {
        if samples.is_empty() {
            return Percentiles::default();
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        let rank = |p: f64| {
            let k = ((p * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
            samples[k - 1]
        };
        Percentiles {
            p50_us: rank(0.50),
            p99_us: rank(0.99),
            samples: samples.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLatency {
    pub begin: Percentiles,
    pub ops: Percentiles,
    pub commit: Percentiles,
}

#[derive(Debug, Clone, Default)]
pub struct ClientStats {
    pub read_only: bool,
    pub commits: u64,
    pub aborts: u64,
    pub reasons: BTreeMap<String, u64>,
    pub begin_us: Vec<f64>,
    pub ops_us: Vec<f64>,
    pub commit_us: Vec<f64>,
    /// (read block, write block) per transaction attempt.
    pub choices: Vec<(u64, u64)>,
}

impl ClientStats {
    pub fn record_abort(&mut self, reason: &str) {
        self.aborts += 1;
        *self.reasons.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn phase(&mut self, begin: Duration, ops: Duration, commit: Duration) {
        self.begin_us.push(begin.as_secs_f64() * 1e6);
        self.ops_us.push(ops.as_secs_f64() * 1e6);
        self.commit_us.push(commit.as_secs_f64() * 1e6);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: String,
    pub policy: String,
    pub clients: usize,
    pub seed: u64,
    pub elapsed_secs: f64,
    pub commits: u64,
    pub aborts: u64,
    pub committed_per_sec: f64,
    /// aborts / (aborts + commits)
    pub abort_rate: f64,
    pub abort_reasons: BTreeMap<String, u64>,
    pub read_only_commits: u64,
    pub read_only_aborts: u64,
    pub latency: PhaseLatency,
    /// Lock calls answered locally by the client.
    pub lock_calls: u64,
    /// Requests that reached the backend, by kind.
    pub transport_calls: BTreeMap<String, u64>,
    pub cache_hits: u64,
    pub backend_fetches: u64,
    /// Backend read timestamp after the run.
    pub final_read_ts: u64,
    /// SHA-256 over every client's block choices, in client order.
    pub block_choice_digest: String,
    /// Set by the checker when it ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<String>,
}

pub fn abort_rate(commits: u64, aborts: u64) -> f64 {
    if commits + aborts == 0 {
        0.0
    } else {
        aborts as f64 / (commits + aborts) as f64
    }
}

impl Metrics {
    pub fn merge(stats: &[ClientStats], elapsed: Duration) -> Metrics {
        let mut m = Metrics::default();
        let mut begin = Vec::new();
        let mut ops = Vec::new();
        let mut commit = Vec::new();
        let mut h = <sha2::Sha256 as sha2::Digest>::new();
        for s in stats {
            m.commits += s.commits;
            m.aborts += s.aborts;
            if s.read_only {
                m.read_only_commits += s.commits;
                m.read_only_aborts += s.aborts;
            }
            for (k, v) in &s.reasons {
                *m.abort_reasons.entry(k.clone()).or_insert(0) += v;
            }
            begin.extend_from_slice(&s.begin_us);
            ops.extend_from_slice(&s.ops_us);
            commit.extend_from_slice(&s.commit_us);
            sha2::Digest::update(&mut h, (s.choices.len() as u64).to_le_bytes());
            for (r, w) in &s.choices {
                sha2::Digest::update(&mut h, r.to_le_bytes());
                sha2::Digest::update(&mut h, w.to_le_bytes());
            }
        }
        m.clients = stats.len();
        m.elapsed_secs = elapsed.as_secs_f64();
        m.committed_per_sec = if m.elapsed_secs > 0.0 {
            m.commits as f64 / m.elapsed_secs
        } else {
            0.0
        };
        m.abort_rate = abort_rate(m.commits, m.aborts);
        m.latency = PhaseLatency {
            begin: Percentiles::of(&mut begin),
            ops: Percentiles::of(&mut ops),
            commit: Percentiles::of(&mut commit),
        };
        m.block_choice_digest = hex::encode(sha2::Digest::finalize(h));
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Plot data: one row per run.
pub fn plot_csv(rows: &[Metrics]) -> String {
    let mut out = String::from("mode,clients,committed_per_sec,abort_rate\n");
    for m in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            m.mode, m.clients, m.committed_per_sec, m.abort_rate
        ));
    }
    out
}
