#!/usr/bin/env python3
"""Smoke test for the hfcl_py extension module.

Locates the compiled cdylib in target/, imports it, and exercises the
bindings end to end: overhead anchors, quantization, noise variances,
deterministic streams, and a tiny in-memory training run.

Run from the repository root after `cargo build --release -p hfcl-py`:

    python3 python/smoke_test.py
"""

import json
import math
import pathlib
import shutil
import sys
import tempfile


def load_module():
    root = pathlib.Path(__file__).resolve().parents[1]
    candidates = [
        root / "target" / "release" / "libhfcl_py.so",
        root / "target" / "debug" / "libhfcl_py.so",
        root / "target" / "release" / "libhfcl_py.dylib",
        root / "target" / "debug" / "libhfcl_py.dylib",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("extension not built; run: cargo build --release -p hfcl-py")
    workdir = pathlib.Path(tempfile.mkdtemp(prefix="hfcl_py_"))
    shutil.copy(lib, workdir / "hfcl_py.so")
    sys.path.insert(0, str(workdir))
    import hfcl_py

    return hfcl_py


def main():
    m = load_module()

    # Overhead formulas hit their anchors.
    assert m.overhead_cl(60000 * 785) == 47_100_000
    assert m.overhead_fl(40, 200_000, 10) == 160_000_000
    assert m.overhead_hfcl(5, 4_710_000, 100, 4_352, 10) == 27_902_000
    # A hybrid run with nobody inactive is plain FL traffic.
    assert m.overhead_hfcl(0, 0, 40, 200_000, 10) == m.overhead_fl(40, 200_000, 10)

    # Quantization is idempotent and keeps endpoints.
    values = [-1.0, -0.33, 0.18, 1.0]
    q = m.quantize(values, 8)
    assert q[0] == -1.0 and q[-1] == 1.0
    assert m.quantize(q, 8) == q
    step = 2.0 / (2**8 - 1)
    assert all(abs(a - b) <= step / 2 + 1e-12 for a, b in zip(q, values))

    # SNR-derived noise variance: total-norm mode is length-times the
    # per-element mode.
    theta = [3.0, 4.0]
    total = m.noise_variance(theta, 20.0, per_element=False)
    per_el = m.noise_variance(theta, 20.0, per_element=True)
    assert math.isclose(total, 25.0 * 10 ** (-1.0), rel_tol=1e-12)
    assert math.isclose(total, 2 * per_el, rel_tol=1e-12)

    # Named streams are pure functions of (seed, name).
    a = m.stream_u64(7, "uplink/3", 5)
    assert a == m.stream_u64(7, "uplink/3", 5)
    assert a != m.stream_u64(7, "uplink/4", 5)
    assert a != m.stream_u64(8, "uplink/3", 5)

    # A tiny hybrid run through the same config pipeline as the CLI.
    config = json.dumps(
        {
            "scheme": "hfcl",
            "clients": 3,
            "inactive": 1,
            "rounds": 3,
            "seeds": [1],
            "minibatch": 16,
            "arch": {"layers": [4, 8, 3]},
            "dataset": {"n_train": 60, "n_test": 30, "classes": 3, "dim": 4},
        }
    )
    rows = m.run_rounds(config, 1)
    assert len(rows) == 3
    assert rows == m.run_rounds(config, 1), "reruns must be identical"
    assert rows != m.run_rounds(config, 2), "seeds must matter"
    for t, acc, loss, up, down in rows:
        assert 0.0 <= acc <= 100.0
        assert loss > 0.0
    # Two active clients exchange the model each round; P = 4*8+8 + 8*3+3.
    p = 4 * 8 + 8 + 8 * 3 + 3
    assert rows[0][3] == 2 * p and rows[0][4] == 2 * p

    # Config errors surface as ValueError.
    try:
        m.run_rounds('{"scheme": "fedprox"}', 1)
    except ValueError as e:
        assert "mu" in str(e)
    else:
        raise AssertionError("invalid config must raise")

    print("smoke test passed")


if __name__ == "__main__":
    main()
