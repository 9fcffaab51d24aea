"""Compare the numba and numpy index kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import json
import timeit

import numpy as np

from shatterlab import kernels


def cases(rng):
    B, n, l, c = 8, 12, 128, 128
    w = 2 * c - 1
    pos = np.arange(l)
    idx = np.clip(pos[None, :] - pos[:, None], -(c - 1), c - 1) + c - 1
    rel = rng.normal(size=(B, n, l, w)).astype(np.float32)
    a = rng.normal(size=(B, n, l, l)).astype(np.float32)
    vals = rng.normal(size=(B * l, 768)).astype(np.float32)
    tok = rng.integers(0, 32000, size=B * l)
    table = rng.random((n, 2 * 512 - 1))
    return {
        "gather_relative": ((rel, idx), {}),
        "scatter_relative": ((a, idx, w), {}),
        "scatter_add_rows": ((vals, tok, 32000), {}),
        "expand_toeplitz": ((table, 512), {}),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    report = {}
    for name, (a, kw) in cases(rng).items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        np.testing.assert_allclose(fast(*a, **kw), slow(*a, **kw), rtol=1e-5, atol=1e-5)
        t_fast = min(timeit.repeat(lambda: fast(*a, **kw), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*a, **kw), number=1, repeat=args.repeat))
        report[name] = {"numba_ms": 1e3 * t_fast, "numpy_ms": 1e3 * t_slow, "speedup": t_slow / t_fast}
        print(f"{name:<18} numba {1e3 * t_fast:8.2f} ms   numpy {1e3 * t_slow:8.2f} ms   x{t_slow / t_fast:.2f}")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
