"""Smoke test for the txnfs Python bindings.

Build and install the extension first:

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl

Then run with `python python/smoke_test.py` or `pytest python/`.
"""

import json

import txnfs_py as fs


def test_read_your_writes_and_isolation():
    b = fs.Backend(mode="block-mv", block_size=16)
    a, c = b.mount(), b.mount()

    t = a.begin()
    fd = t.open("/f", "rwc")
    t.pwrite(fd, b"hello", 20)
    assert t.pread(fd, 5, 20) == b"hello"
    assert t.stat("/f")["length"] == 25

    # Not visible to others before commit.
    r = c.begin(read_only=True)
    assert not r.exists("/f")
    ts = t.commit()
    assert ts == b.read_ts

    # An old snapshot still sees nothing; a new one sees the write.
    assert not r.exists("/f")
    r.commit()
    r = c.begin(read_only=True)
    fd = r.open("/f")
    assert r.pread(fd, 25, 0) == b"\0" * 20 + b"hello"
    r.commit()


def test_conflicting_writers_abort():
    b = fs.Backend(block_size=16)
    a, c = b.mount(), b.mount()
    t = a.begin()
    t.write(t.open("/n", "rwc"), b"\x00")
    t.commit()

    t1, t2 = a.begin(), c.begin()
    for t in (t1, t2):
        fd = t.open("/n", "rw")
        v = t.read(fd, 1)[0]
        t.pwrite(fd, bytes([v + 1]), 0)
    t1.commit()
    try:
        t2.commit()
    except fs.TxnAborted:
        pass
    else:
        raise AssertionError("second writer should abort")
    assert issubclass(fs.TxnAborted, fs.FsError)


def test_errors_and_namespace():
    b = fs.Backend()
    t = b.mount().begin()
    try:
        t.open("/missing")
    except fs.FsError as e:
        assert "no such file" in str(e)
    else:
        raise AssertionError("open of a missing file should fail")
    t.mkdir("/d")
    t.close(t.open("/d/x", "wc"))
    t.rename("/d/x", "/d/y")
    assert t.readdir("/d") == ["y"]
    t.commit()


def test_over_tcp():
    b = fs.Backend(mode="block", block_size=64)
    addr = b.serve()
    m = fs.Mount.connect(addr, block_size=64)
    t = m.begin()
    t.write(t.open("/remote", "wc"), b"over the wire")
    t.commit()
    snap = json.loads(b.dump(full=True))
    paths = [e["path"] for e in snap["entries"]]
    assert paths == ["/", "/remote"]


def test_workload_and_checker():
    config = {
        "clients": 4,
        "read_only_clients": 1,
        "txns": 200,
        "file_size": 8192,
        "block_size": 256,
        "hot_block_count": 4,
        "hot_probability": 0.7,
        "think_time_ms": 0,
        "mode": "block_multiversioned",
        "scheduler": "interleaved",
        "seed": 9,
    }
    metrics, history, error = fs.run_workload(json.dumps(config))
    assert error is None, error
    m = json.loads(metrics)
    assert m["commits"] + m["aborts"] == 200
    assert m["read_only_aborts"] == 0
    assert fs.check_history(history) is None

    h = json.loads(history)
    read = next(e for e in h["events"] if e["t"] == "read" and e["bytes"])
    read["bytes"] = "AAAA" if read["bytes"] != "AAAA" else "AQAA"
    read["count"] = 3
    assert fs.check_history(json.dumps(h)) is not None


if __name__ == "__main__":
    for name, f in list(globals().items()):
        if name.startswith("test_"):
            f()
            print("ok", name)
