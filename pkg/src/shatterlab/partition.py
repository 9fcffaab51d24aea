"""Bernstein partition of unity over relative positions and the constant mask tensor.

Parts ``0..D`` cover offsets ``x >= 0`` (Bernstein index ascending) and parts
``D+1..n-1`` cover ``x < 0``.  Each half is identically zero outside its side,
so the family sums to one at every integer offset.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

MAX_EXACT_DEGREE = 16


def bernstein_basis(degree: int, u) -> np.ndarray:
    """All ``degree+1`` Bernstein polynomials at ``u``; trailing axis indexes the polynomial.

    ``u`` is clamped into [0, 1].
    """
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    nu = np.arange(degree + 1)
    # exact integer binomials, converted once
    coef = np.array([math.comb(degree, k) for k in nu], dtype=np.float64)
    uu = u[..., None]
    return coef * uu**nu * (1.0 - uu) ** (degree - nu)


def u_transform(x, alpha: float, beta: float) -> np.ndarray:
    """Map relative distance ``x >= 0`` onto [0, 1]: ``ln(e^(beta x)(1 - e^alpha) + e^alpha) / alpha``.

    Evaluated as ``1 + softplus(beta x - alpha + log1p(-e^alpha)) / alpha`` so large
    ``beta * x`` does not underflow.
    """
    if not alpha < 0 or not beta < 0:
        raise ValueError(f"alpha and beta must be negative, got alpha={alpha}, beta={beta}")
    x = np.asarray(x, dtype=np.float64)
    z = beta * x - alpha + np.log1p(-np.exp(alpha))
    u = 1.0 + np.logaddexp(0.0, z) / alpha
    return np.clip(u, 0.0, 1.0)


def layer_schedule(k: int, num_layers: int, degree: int) -> tuple[float, float]:
    """Per-layer (alpha, beta); early layers concentrate parts near offset 0."""
    if not 0 <= k < num_layers:
        raise ValueError(f"layer index {k} outside [0, {num_layers})")
    frac = (k + 1) / num_layers
    if degree == 0:
        # the usual formula divides by the degree; with one part per side u is unused
        return -frac, -1.0
    alpha = -frac * degree
    beta = -(1.0 / degree) * (degree / 12.0) ** frac
    return alpha, beta


@dataclass(frozen=True)
class PartitionSpec:
    """Part count, layer count, and the per-layer (alpha, beta) schedule."""

    parts: int
    num_layers: int
    alphas: tuple[float, ...] = field(default=())
    betas: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.parts < 2 or self.parts % 2:
            raise ValueError(f"part count must be even and >= 2, got {self.parts}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not self.alphas:
            sched = [layer_schedule(k, self.num_layers, self.degree) for k in range(self.num_layers)]
            if self.degree == 0:
                log.info("part count 2: degenerate schedule alpha=-(k+1)/L, beta=-1 substituted")
            object.__setattr__(self, "alphas", tuple(a for a, _ in sched))
            object.__setattr__(self, "betas", tuple(b for _, b in sched))
        if len(self.alphas) != self.num_layers or len(self.betas) != self.num_layers:
            raise ValueError("alphas/betas must have one entry per layer")
        if any(a >= 0 for a in self.alphas) or any(b >= 0 for b in self.betas):
            raise ValueError("alphas and betas must all be negative")

    @property
    def degree(self) -> int:
        return self.parts // 2 - 1

    def key(self) -> str:
        payload = json.dumps([self.parts, self.num_layers, list(self.alphas), list(self.betas)])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "parts": self.parts,
            "num_layers": self.num_layers,
            "alphas": list(self.alphas),
            "betas": list(self.betas),
        }


def eval_parts(x, k: int, spec: PartitionSpec) -> np.ndarray:
    """The ``n`` part weights at signed offset(s) ``x`` for layer ``k``; trailing axis is the part."""
    x = np.asarray(x, dtype=np.float64)
    deg = spec.degree
    alpha, beta = spec.alphas[k], spec.betas[k]
    right = x >= 0
    basis = bernstein_basis(deg, u_transform(np.abs(x), alpha, beta))
    out = np.zeros(x.shape + (spec.parts,), dtype=np.float64)
    out[..., : deg + 1] = np.where(right[..., None], basis, 0.0)
    out[..., deg + 1 :] = np.where(right[..., None], 0.0, basis)
    return out


@dataclass(frozen=True)
class PartitionMask:
    values: np.ndarray  # (n, l, l), values[h, i, j] = f_h(j - i)
    layer: int
    spec: PartitionSpec

    @property
    def length(self) -> int:
        return self.values.shape[-1]


_cache: dict[tuple[int, int, str], np.ndarray] = {}
_cache_lock = threading.Lock()


def build_mask(length: int, k: int, spec: PartitionSpec) -> PartitionMask:
    """Constant mask for sequence length ``length`` at layer ``k`` (cached, read-only)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    key = (length, k, spec.key())
    values = _cache.get(key)
    if values is None:
        offsets = np.arange(-(length - 1), length)
        table = np.ascontiguousarray(eval_parts(offsets, k, spec).T)
        values = kernels.expand_toeplitz(table, length)
        values.setflags(write=False)
        with _cache_lock:
            values = _cache.setdefault(key, values)
    return PartitionMask(values, k, spec)


def clear_cache() -> None:
    with _cache_lock:
        _cache.clear()


def hard_bucket_parts(boundaries, x) -> np.ndarray:
    """Indicator weights for half-open buckets ``b_g <= x < b_{g+1}``; trailing axis is the bucket."""
    b = np.asarray(boundaries, dtype=np.float64)
    if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
        raise ValueError("boundaries must be a strictly increasing sequence with at least two entries")
    x = np.asarray(x, dtype=np.float64)
    g = np.searchsorted(b, x, side="right") - 1
    return np.eye(b.size - 1)[g]


def bucket_index(boundaries, x) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.float64)
    return np.searchsorted(b, np.asarray(x, dtype=np.float64), side="right") - 1


def t5_boundaries(num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Increasing bucket boundaries reproducing bidirectional T5 relative bucketing.

    T5 maps ``|x|`` into ``num_buckets // 2`` buckets per side (exact near zero,
    log-spaced out to ``max_distance``).  Its id for ``x > 0, |x| = 0`` is never
    hit, so the populated buckets number ``num_buckets - 1``.
    """
    half = num_buckets // 2
    max_exact = half // 2

    def side_bucket(r: int) -> int:
        if r < max_exact:
            return r
        big = max_exact + int(math.log(r / max_exact) / math.log(max_distance / max_exact) * (half - max_exact))
        return min(big, half - 1)

    # distances at which the one-sided bucket id increments
    thresholds = []
    prev = side_bucket(1)
    r = 2
    limit = max(max_distance * 2, 4)
    while r <= limit:
        cur = side_bucket(r)
        if cur != prev:
            thresholds.append(r)
            prev = cur
        r += 1
    right = [0, 1] + thresholds
    left = [-t + 1 for t in reversed(thresholds)] + [0]
    inner = sorted(set(left[:-1]) | set(right))
    return np.array([-np.inf] + inner + [np.inf])


def partition_table(spec: PartitionSpec, radius: int = 64) -> list[tuple[int, int, int, float]]:
    """(layer, part, x, weight) rows for integer x in [-radius, radius]."""
    xs = np.arange(-radius, radius + 1)
    rows = []
    for k in range(spec.num_layers):
        w = eval_parts(xs, k, spec)
        for h in range(spec.parts):
            for x, v in zip(xs, w[:, h]):
                rows.append((k, h, int(x), float(v)))
    return rows
