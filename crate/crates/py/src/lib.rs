//! Python bindings: a backend (in-process or served over TCP), mounts,
//! transactions with POSIX-like calls, and the workload harness.

use std::sync::{Arc, Mutex};

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use txnfs::backend::{Backend as CoreBackend, BackendConfig, CommitResult};
use txnfs::client::{FsError as CoreFsError, Mount as CoreMount, MountConfig, OpenFlags, Txn as CoreTxn};
use txnfs::harness::{check_strict_serializability, run_workload as core_run_workload, Verdict, WorkloadConfig};
use txnfs::model::{CachePolicy, VersioningMode};
use txnfs::wire::server::Server;
use txnfs::wire::transport::{Embedded, TcpTransport};

create_exception!(txnfs_py, FsError, PyOSError, "A file system call failed.");
create_exception!(txnfs_py, TxnAborted, FsError, "The transaction failed validation and was rolled back.");

fn fs_err(e: CoreFsError) -> PyErr {
    match e {
        CoreFsError::Aborted(reason) => TxnAborted::new_err(reason.to_string()),
        other => FsError::new_err(other.to_string()),
    }
}

fn parse_mode(s: &str) -> PyResult<VersioningMode> {
    VersioningMode::from_short_name(s).ok_or_else(|| PyValueError::new_err(format!("unknown mode {s:?}")))
}

fn parse_policy(s: &str) -> PyResult<CachePolicy> {
    CachePolicy::from_short_name(s).ok_or_else(|| PyValueError::new_err(format!("unknown policy {s:?}")))
}

/// `"r"`, `"w"`, `"rw"` plus any of `c` (create), `x` (exclusive),
/// `t` (truncate), `a` (append).
fn parse_flags(s: &str) -> PyResult<OpenFlags> {
    let mut f = OpenFlags::from_bits(0);
    for ch in s.chars() {
        let bit = match ch {
            'r' => OpenFlags::READ,
            'w' => OpenFlags::WRITE,
            'c' => OpenFlags::CREATE,
            'x' => OpenFlags::EXCL,
            't' => OpenFlags::TRUNC,
            'a' => OpenFlags::APPEND,
            _ => return Err(PyValueError::new_err(format!("bad open flag {ch:?} in {s:?}"))),
        };
        f = OpenFlags::from_bits(f.bits() | bit.bits());
    }
    Ok(f)
}

#[pyclass(module = "txnfs_py")]
struct Backend {
    inner: Arc<CoreBackend>,
}

#[pymethods]
impl Backend {
    #[new]
    #[pyo3(signature = (mode = "block", block_size = 1024, undo_window = 1024))]
    fn new(mode: &str, block_size: usize, undo_window: u64) -> PyResult<Self> {
        if block_size == 0 {
            return Err(PyValueError::new_err("block_size must be positive"));
        }
        Ok(Backend {
            inner: Arc::new(CoreBackend::new(BackendConfig {
                block_size,
                undo_window,
                ..BackendConfig::with_mode(parse_mode(mode)?)
            })),
        })
    }

    #[getter]
    fn read_ts(&self) -> u64 {
        self.inner.current_read_timestamp().0
    }

    /// Snapshot as a JSON string.
    #[pyo3(signature = (full = false))]
    fn dump(&self, full: bool) -> String {
        serde_json::to_string(&self.inner.dump(full)).expect("snapshot serializes")
    }

    fn digest(&self) -> String {
        self.inner.dump(false).digest()
    }

    /// Serves this backend on `addr` from a background thread and returns
    /// the bound address.
    #[pyo3(signature = (addr = "127.0.0.1:0"))]
    fn serve(&self, addr: &str) -> PyResult<String> {
        let server = Server::bind(addr, Arc::clone(&self.inner)).map_err(|e| PyOSError::new_err(e.to_string()))?;
        let bound = server.local_addr().map_err(|e| PyOSError::new_err(e.to_string()))?;
        server.spawn();
        Ok(bound.to_string())
    }

    #[pyo3(signature = (policy = "invalidate"))]
    fn mount(&self, policy: &str) -> PyResult<Mount> {
        let config = MountConfig {
            block_size: self.inner.block_size(),
            policy: parse_policy(policy)?,
            ..MountConfig::default()
        };
        Ok(Mount {
            inner: Arc::new(CoreMount::new(Arc::new(Embedded::new(Arc::clone(&self.inner))), config)),
        })
    }
}

#[pyclass(module = "txnfs_py")]
struct Mount {
    inner: Arc<CoreMount>,
}

#[pymethods]
impl Mount {
    /// Mounts a backend served by `txnfs serve`.
    #[staticmethod]
    #[pyo3(signature = (addr, block_size = 1024, policy = "invalidate"))]
    fn connect(addr: &str, block_size: usize, policy: &str) -> PyResult<Mount> {
        let t = TcpTransport::connect(addr).map_err(|e| PyOSError::new_err(e.to_string()))?;
        let config = MountConfig {
            block_size,
            policy: parse_policy(policy)?,
            ..MountConfig::default()
        };
        Ok(Mount {
            inner: Arc::new(CoreMount::new(Arc::new(t), config)),
        })
    }

    #[pyo3(signature = (read_only = false))]
    fn begin(&self, py: Python<'_>, read_only: bool) -> PyResult<Txn> {
        let m = Arc::clone(&self.inner);
        let t = py
            .detach(move || if read_only { m.begin_read_only() } else { m.begin() })
            .map_err(fs_err)?;
        Ok(Txn {
            inner: Mutex::new(t),
        })
    }
}

#[pyclass(module = "txnfs_py")]
struct Txn {
    inner: Mutex<CoreTxn>,
}

impl Txn {
    fn with<R>(&self, f: impl FnOnce(&mut CoreTxn) -> Result<R, CoreFsError>) -> PyResult<R> {
        let mut t = self.inner.lock().map_err(|_| PyRuntimeError::new_err("transaction lock poisoned"))?;
        f(&mut t).map_err(fs_err)
    }
}

#[pymethods]
impl Txn {
    #[getter]
    fn read_ts(&self) -> PyResult<u64> {
        self.with(|t| Ok(t.read_ts().0))
    }

    #[getter]
    fn active(&self) -> PyResult<bool> {
        self.with(|t| Ok(t.is_active()))
    }

    #[pyo3(signature = (path, flags = "r", mode = 0o644))]
    fn open(&self, path: &str, flags: &str, mode: u32) -> PyResult<u32> {
        let flags = parse_flags(flags)?;
        self.with(|t| t.open(path, flags, mode))
    }

    fn close(&self, fd: u32) -> PyResult<()> {
        self.with(|t| t.close(fd))
    }

    fn pread<'py>(&self, py: Python<'py>, fd: u32, count: usize, offset: u64) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.with(|t| t.pread(fd, count, offset))?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn read<'py>(&self, py: Python<'py>, fd: u32, count: usize) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.with(|t| t.read(fd, count))?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn pwrite(&self, fd: u32, data: &[u8], offset: u64) -> PyResult<usize> {
        self.with(|t| t.pwrite(fd, data, offset))
    }

    fn write(&self, fd: u32, data: &[u8]) -> PyResult<usize> {
        self.with(|t| t.write(fd, data))
    }

    fn truncate(&self, path: &str, length: u64) -> PyResult<()> {
        self.with(|t| t.truncate(path, length))
    }

    fn stat<'py>(&self, py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
        let m = self.with(|t| t.stat(path))?;
        let d = PyDict::new(py);
        d.set_item("file", m.file.0)?;
        d.set_item("length", m.length)?;
        d.set_item("mode", m.mode)?;
        d.set_item("is_dir", m.kind == txnfs::model::FileKind::Directory)?;
        Ok(d)
    }

    fn exists(&self, path: &str) -> PyResult<bool> {
        self.with(|t| t.exists(path))
    }

    fn readdir(&self, path: &str) -> PyResult<Vec<String>> {
        self.with(|t| t.readdir(path)).map(|es| es.into_iter().map(|e| e.name).collect())
    }

    #[pyo3(signature = (path, mode = 0o755))]
    fn mkdir(&self, path: &str, mode: u32) -> PyResult<()> {
        self.with(|t| t.mkdir(path, mode))
    }

    fn unlink(&self, path: &str) -> PyResult<()> {
        self.with(|t| t.unlink(path))
    }

    fn rmdir(&self, path: &str) -> PyResult<()> {
        self.with(|t| t.rmdir(path))
    }

    fn rename(&self, src: &str, dst: &str) -> PyResult<()> {
        self.with(|t| t.rename(src, dst))
    }

    /// Commit timestamp on success; raises `TxnAborted` otherwise.
    fn commit(&self, py: Python<'_>) -> PyResult<u64> {
        let r = py.detach(|| self.with(|t| t.commit()))?;
        match r {
            CommitResult::Committed(ts) => Ok(ts.0),
            CommitResult::Aborted(reason) => Err(TxnAborted::new_err(reason.to_string())),
        }
    }

    fn abort(&self) -> PyResult<()> {
        self.with(|t| {
            t.abort();
            Ok(())
        })
    }
}

/// Runs the workload described by a JSON config against a fresh in-process
/// backend. Returns `(metrics_json, history_json, error)`, where `error`
/// is `None` when the history checks and matches the final state.
#[pyfunction]
fn run_workload(py: Python<'_>, config_json: &str) -> PyResult<(String, String, Option<String>)> {
    let config: WorkloadConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?;
    let out = py
        .detach(|| core_run_workload(&config))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let verdict = out.verify().err();
    Ok((out.metrics.to_json(), out.history.to_json(), verdict))
}

/// Checks a history JSON. Returns `None` when valid, else the witness.
#[pyfunction]
fn check_history(history_json: &str) -> PyResult<Option<String>> {
    let h = serde_json::from_str(history_json).map_err(|e| PyValueError::new_err(format!("bad history: {e}")))?;
    match check_strict_serializability(&h) {
        Ok(Verdict::Valid) => Ok(None),
        Ok(Verdict::Violation(w)) => Ok(Some(w.to_string())),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

#[pymodule]
fn txnfs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Backend>()?;
    m.add_class::<Mount>()?;
    m.add_class::<Txn>()?;
    m.add_function(wrap_pyfunction!(run_workload, m)?)?;
    m.add_function(wrap_pyfunction!(check_history, m)?)?;
    m.add("FsError", m.py().get_type::<FsError>())?;
    m.add("TxnAborted", m.py().get_type::<TxnAborted>())?;
    Ok(())
}
