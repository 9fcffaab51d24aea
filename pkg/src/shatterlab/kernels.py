"""Index-shuffling kernels with a numba path and a pure-numpy fallback.

These are the loops that move data between relative-offset and absolute-position
layouts (RPE), scatter embedding gradients, and expand the partition table into
the constant ``n x l x l`` mask.  Set ``SHATTERLAB_NUMBA=0`` to force the numpy
path; both paths are importable explicitly for benchmarking.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SHATTERLAB_NUMBA", "1").lower() not in ("0", "false", "no")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def gather_relative_numpy(rel: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[..., i, j] = rel[..., i, idx[i, j]]."""
    lead = rel.shape[:-2]
    full = np.broadcast_to(idx, lead + idx.shape)
    return np.take_along_axis(rel, full, axis=-1)


def scatter_relative_numpy(a: np.ndarray, idx: np.ndarray, width: int) -> np.ndarray:
    """out[..., i, idx[i, j]] += a[..., i, j]; the adjoint of gather_relative."""
    lead = a.shape[:-2]
    rows, cols = idx.shape
    flat = a.reshape(-1, rows, cols)
    out = np.zeros((flat.shape[0], rows, width), dtype=a.dtype)
    # bincount keeps a fixed summation order per output slot
    offs = (np.arange(rows)[:, None] * width + idx).ravel()
    for b in range(flat.shape[0]):
        out[b] = np.bincount(offs, weights=flat[b].ravel(), minlength=rows * width).reshape(rows, width)
    return out.reshape(lead + (rows, width))


def scatter_add_rows_numpy(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """out[idx[k]] += values[k] for flat idx; values has shape (len(idx), d)."""
    out = np.zeros((num_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, idx, values)
    return out


def expand_toeplitz_numpy(table: np.ndarray, length: int) -> np.ndarray:
    """table is (n, 2*length-1) over offsets -(length-1)..length-1; out[h,i,j] = table[h, j-i+length-1]."""
    pos = np.arange(length)
    offs = pos[None, :] - pos[:, None] + (length - 1)
    return table[:, offs]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _gather_relative_3d(rel, idx):
        nb, rows, _ = rel.shape
        cols = idx.shape[1]
        out = np.empty((nb, rows, cols), dtype=rel.dtype)
        for b in range(nb):
            for i in range(rows):
                for j in range(cols):
                    out[b, i, j] = rel[b, i, idx[i, j]]
        return out

    @njit(cache=True)
    def _scatter_relative_3d(a, idx, width):
        nb, rows, cols = a.shape
        out = np.zeros((nb, rows, width), dtype=a.dtype)
        for b in range(nb):
            for i in range(rows):
                for j in range(cols):
                    out[b, i, idx[i, j]] += a[b, i, j]
        return out

    @njit(cache=True)
    def _scatter_add_rows(values, idx, out):
        d = values.shape[1]
        for k in range(idx.shape[0]):
            r = idx[k]
            for c in range(d):
                out[r, c] += values[k, c]

    @njit(cache=True)
    def _expand_toeplitz(table, length):
        n = table.shape[0]
        out = np.empty((n, length, length), dtype=table.dtype)
        for h in range(n):
            for i in range(length):
                for j in range(length):
                    out[h, i, j] = table[h, j - i + length - 1]
        return out

    def gather_relative_numba(rel: np.ndarray, idx: np.ndarray) -> np.ndarray:
        lead = rel.shape[:-2]
        flat = np.ascontiguousarray(rel).reshape((-1,) + rel.shape[-2:])
        out = _gather_relative_3d(flat, np.ascontiguousarray(idx, dtype=np.int64))
        return out.reshape(lead + idx.shape)

    def scatter_relative_numba(a: np.ndarray, idx: np.ndarray, width: int) -> np.ndarray:
        lead = a.shape[:-2]
        flat = np.ascontiguousarray(a).reshape((-1,) + a.shape[-2:])
        out = _scatter_relative_3d(flat, np.ascontiguousarray(idx, dtype=np.int64), width)
        return out.reshape(lead + (idx.shape[0], width))

    def scatter_add_rows_numba(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
        # np.zeros here gets lazily zeroed pages; zeroing inside the jit costs a full memset
        out = np.zeros((num_rows, values.shape[1]), dtype=values.dtype)
        _scatter_add_rows(np.ascontiguousarray(values), np.ascontiguousarray(idx, dtype=np.int64), out)
        return out

    def expand_toeplitz_numba(table: np.ndarray, length: int) -> np.ndarray:
        return _expand_toeplitz(np.ascontiguousarray(table), length)


if USE_NUMBA:
    gather_relative = gather_relative_numba
    scatter_relative = scatter_relative_numba
    scatter_add_rows = scatter_add_rows_numba
    expand_toeplitz = expand_toeplitz_numba
else:
    gather_relative = gather_relative_numpy
    scatter_relative = scatter_relative_numpy
    scatter_add_rows = scatter_add_rows_numpy
    expand_toeplitz = expand_toeplitz_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
