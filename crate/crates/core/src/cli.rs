//! The `txnfs` command line: serve, bench, check, dump.
//!
//! Exit codes: 0 success, 1 operational error, 2 correctness violation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::backend::{Backend, BackendConfig};
use crate::harness::{
    check_strict_serializability, compare_modes, plot_csv, run_workload, run_workload_on, History,
    HarnessError, Metrics, RunOutput, Scheduler, Verdict, WorkloadConfig,
};
use crate::model::{CachePolicy, VersioningMode};
use crate::wire::server::Server;
use crate::wire::transport::{BackendApi, TcpTransport, Transport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "txnfs", version, about = "Transactional shared file system")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a backend serving the wire protocol.
    Serve(ServeArgs),
    /// Run the hot-block workload and check its history.
    Bench(BenchArgs),
    /// Check a recorded history for strict serializability.
    Check(CheckArgs),
    /// Print a backend's state snapshot as JSON.
    Dump(DumpArgs),
}

fn parse_mode(s: &str) -> Result<VersioningMode, String> {
    VersioningMode::from_short_name(s).ok_or_else(|| format!("unknown mode {s:?} (file, block, block-mv)"))
}

fn parse_policy(s: &str) -> Result<CachePolicy, String> {
    CachePolicy::from_short_name(s)
        .ok_or_else(|| format!("unknown policy {s:?} (update-all, invalidate, frequency, stale)"))
}

fn parse_scheduler(s: &str) -> Result<Scheduler, String> {
    match s {
        "threads" => Ok(Scheduler::Threads),
        "interleaved" => Ok(Scheduler::Interleaved),
        _ => Err(format!("unknown scheduler {s:?} (threads, interleaved)")),
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
    #[arg(long, default_value = "block", value_parser = parse_mode)]
    pub mode: VersioningMode,
    #[arg(long, default_value_t = crate::model::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub undo_window: u64,
    #[arg(long, default_value_t = 4096)]
    pub log_window: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run the backend in this process.
    #[arg(long, conflicts_with = "connect")]
    pub embedded: bool,
    /// Address of a running `txnfs serve`.
    #[arg(long)]
    pub connect: Option<String>,
    /// Workload config as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub read_only_clients: Option<usize>,
    /// Seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Total transaction attempts; overrides the duration.
    #[arg(long)]
    pub txns: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<VersioningMode>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<CachePolicy>,
    #[arg(long)]
    pub file_size: Option<u64>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub hot_blocks: Option<u64>,
    #[arg(long)]
    pub hot_probability: Option<f64>,
    /// Milliseconds.
    #[arg(long)]
    pub think_time: Option<f64>,
    #[arg(long)]
    pub undo_window: Option<u64>,
    /// Microseconds added to every request (embedded only).
    #[arg(long)]
    pub net_delay_us: Option<u64>,
    #[arg(long, value_parser = parse_scheduler)]
    pub scheduler: Option<Scheduler>,
    /// One run per versioning mode.
    #[arg(long)]
    pub compare_modes: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// history.json written by `bench` (one history or a list).
    pub history: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long, required_unless_present = "embedded")]
    pub connect: Option<String>,
    /// Dump a fresh in-process backend.
    #[arg(long)]
    pub embedded: bool,
    /// Include file contents.
    #[arg(long)]
    pub full: bool,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
        Command::Check(a) => check(a),
        Command::Dump(a) => dump(a),
    }
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("txnfs: {msg}");
    EXIT_ERROR
}

fn serve(a: ServeArgs) -> i32 {
    let backend = Arc::new(Backend::new(BackendConfig {
        block_size: a.block_size,
        undo_window: a.undo_window,
        log_window: a.log_window,
        ..BackendConfig::with_mode(a.mode)
    }));
    let server = match Server::bind(&a.listen, backend) {
        Ok(s) => s,
        Err(e) => return fail(format!("cannot listen on {}: {e}", a.listen)),
    };
    let addr = match server.local_addr() {
        Ok(addr) => addr,
        Err(e) => return fail(e),
    };
    println!("txnfs serving on {addr} mode={} block_size={}", a.mode, a.block_size);
    let _ = std::io::stdout().flush();
    match server.run() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}

fn workload_config(a: &BenchArgs) -> Result<WorkloadConfig, HarnessError> {
    let mut c = match &a.config {
        Some(p) => WorkloadConfig::load(p)?,
        None => WorkloadConfig::default(),
    };
    macro_rules! set {
        ($($field:ident = $flag:expr),* $(,)?) => {
            $(if let Some(v) = $flag { c.$field = v; })*
        };
    }
    set!(
        clients = a.clients,
        read_only_clients = a.read_only_clients,
        duration_secs = a.duration,
        seed = a.seed,
        mode = a.mode,
        policy = a.policy,
        file_size = a.file_size,
        block_size = a.block_size,
        hot_block_count = a.hot_blocks,
        hot_probability = a.hot_probability,
        think_time_ms = a.think_time,
        undo_window = a.undo_window,
        net_delay_us = a.net_delay_us,
        scheduler = a.scheduler,
    );
    if a.txns.is_some() {
        c.txns = a.txns;
    }
    c.validate()?;
    Ok(c)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    std::fs::write(dir.join(name), contents).map_err(|e| format!("{}: {e}", dir.join(name).display()))
}

fn bench(a: BenchArgs) -> i32 {
    if !a.embedded && a.connect.is_none() {
        return fail("bench needs --embedded or --connect ADDR");
    }
    let mut config = match workload_config(&a) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(addr) = &a.connect {
        // Clients must split files the way the server does.
        let served = match TcpTransport::connect(addr.as_str()).map_err(|e| e.to_string()).and_then(|t| t.dump(false).map_err(|e| e.to_string())) {
            Ok(s) => s.block_size,
            Err(e) => return fail(format!("{addr}: {e}")),
        };
        if a.block_size.is_some_and(|b| b != served) {
            return fail(format!("--block-size {} but the server uses {served}", config.block_size));
        }
        config.block_size = served;
        if let Err(e) = config.validate() {
            return fail(e);
        }
    }
    let runs: Result<Vec<RunOutput>, HarnessError> = match (&a.connect, a.compare_modes) {
        (Some(_), true) => return fail("--compare-modes needs --embedded (the server fixes the mode)"),
        (Some(addr), false) => {
            let addr = addr.clone();
            let connect = move || Ok(Arc::new(TcpTransport::connect(addr.as_str())?) as Arc<dyn Transport>);
            run_workload_on(&config, &connect).map(|r| vec![r])
        }
        (None, true) => compare_modes(&config),
        (None, false) => run_workload(&config).map(|r| vec![r]),
    };
    let mut runs = match runs {
        Ok(r) => r,
        Err(e) => return fail(e),
    };

    let mut violation = None;
    for r in &mut runs {
        let outcome = if a.embedded {
            r.verify()
        } else {
            match check_strict_serializability(&r.history) {
                Ok(Verdict::Valid) => Ok(()),
                Ok(Verdict::Violation(w)) => Err(format!("violation: {w}")),
                Err(e) => Err(e.to_string()),
            }
        };
        r.metrics.checker = Some(match &outcome {
            Ok(()) => "valid".into(),
            Err(e) => e.clone(),
        });
        if let Err(e) = outcome {
            violation.get_or_insert(format!("mode {}: {e}", r.metrics.mode));
        }
    }

    if let Err(e) = std::fs::create_dir_all(&a.out) {
        return fail(format!("{}: {e}", a.out.display()));
    }
    let metrics: Vec<&Metrics> = runs.iter().map(|r| &r.metrics).collect();
    let histories: Vec<&History> = runs.iter().map(|r| &r.history).collect();
    let written = if runs.len() == 1 {
        write_out(&a.out, "metrics.json", &runs[0].metrics.to_json())
            .and_then(|()| write_out(&a.out, "history.json", &runs[0].history.to_json()))
    } else {
        write_out(&a.out, "metrics.json", &serde_json::to_string_pretty(&metrics).expect("serialize"))
            .and_then(|()| write_out(&a.out, "history.json", &serde_json::to_string(&histories).expect("serialize")))
    };
    let rows: Vec<Metrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    if let Err(e) = written.and_then(|()| write_out(&a.out, "plot.csv", &plot_csv(&rows))) {
        return fail(e);
    }
    for m in &rows {
        println!(
            "mode={} policy={} clients={} commits={} aborts={} abort_rate={:.4} committed_per_sec={:.1} commit_p50_us={:.1}",
            m.mode, m.policy, m.clients, m.commits, m.aborts, m.abort_rate, m.committed_per_sec, m.latency.commit.p50_us
        );
    }
    match violation {
        Some(w) => {
            eprintln!("txnfs: {w}");
            EXIT_VIOLATION
        }
        None => EXIT_OK,
    }
}

fn load_histories(path: &Path) -> Result<Vec<History>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if text.trim().is_empty() {
        return Err(format!("{}: empty file", path.display()));
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|h| vec![h])
    };
    parsed.map_err(|e| format!("{}: {e}", path.display()))
}

fn check(a: CheckArgs) -> i32 {
    let histories = match load_histories(&a.history) {
        Ok(h) => h,
        Err(e) => return fail(e),
    };
    for (i, h) in histories.iter().enumerate() {
        match check_strict_serializability(h) {
            Ok(Verdict::Valid) => {}
            Ok(Verdict::Violation(w)) => {
                println!("violation in history {i}: {w}");
                return EXIT_VIOLATION;
            }
            Err(e) => return fail(format!("history {i}: {e}")),
        }
    }
    let (commits, aborts) = histories.iter().fold((0, 0), |acc, h| {
        let (c, a) = h.outcomes();
        (acc.0 + c, acc.1 + a)
    });
    println!("valid: {} histories, {commits} commits, {aborts} aborts", histories.len());
    EXIT_OK
}

fn dump(a: DumpArgs) -> i32 {
    let snapshot = match &a.connect {
        Some(addr) => match TcpTransport::connect(addr.as_str()) {
            Ok(t) => t.dump(a.full),
            Err(e) => return fail(format!("{addr}: {e}")),
        },
        None => Ok(Backend::new(BackendConfig::default()).dump(a.full)),
    };
    match snapshot {
        Ok(s) => {
            println!("{}", serde_json::to_string_pretty(&s).expect("serialize"));
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_are_errors() {
        assert!(Cli::try_parse_from(["txnfs", "bench", "--embedded", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["txnfs", "serve", "--mode", "nope"]).is_err());
        assert!(Cli::try_parse_from(["txnfs"]).is_err());
    }

    #[test]
    fn flag_mapping() {
        let cli = Cli::try_parse_from(["txnfs", "serve", "--mode", "file", "--undo-window", "7"]).unwrap();
        match cli.command {
            Command::Serve(s) => assert_eq!((s.mode, s.undo_window), (VersioningMode::FileVersioned, 7)),
            _ => panic!(),
        }
        let cli = Cli::try_parse_from(["txnfs", "bench", "--embedded", "--clients", "3", "--policy", "stale", "--txns", "9"]).unwrap();
        let Command::Bench(b) = cli.command else { panic!() };
        let c = workload_config(&b).unwrap();
        assert_eq!((c.clients, c.policy, c.txns), (3, CachePolicy::Stale, Some(9)));
    }
}
