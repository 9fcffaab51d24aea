"""Random attention instances shared by the unit and acceptance suites."""

import numpy as np

import oracles
from shatterlab import numerics as nx
from shatterlab.attention import AttentionParams, AttentionVariant, attend
from shatterlab.partition import PartitionSpec, build_mask, t5_boundaries

ALL_VARIANTS = list(AttentionVariant)


def instance(variant, rng, l, d, n, clip=3, padded=True):
    """Float64 params, input, pad, mask/boundaries, and the oracle's output."""
    v = AttentionVariant(variant)
    with nx.precision("float64"):
        boundaries = t5_boundaries(8, 16)
        p = AttentionParams.init(v, d, n, rng, std=0.5, rpe_clip=clip, rab_buckets=len(boundaries) - 1)
        for t in p.named().values():
            if t.ndim == 1:
                t.data[:] = rng.normal(scale=0.3, size=t.shape)
    X = rng.normal(size=(l, d))
    pad = np.ones(l, dtype=bool)
    if padded and l > 2:
        pad[rng.integers(1, l) :] = False
    k, L = int(rng.integers(0, 3)), 3
    N = build_mask(l, k, PartitionSpec(n, L)).values if v.uses_mask else None
    return v, p, X, pad, N, boundaries


def run(v, p, X, pad, N, boundaries, n, clip=3):
    out = attend(v, nx.constant(X, np.float64), p, pad[None], n=n, mask=N, rpe_clip=clip, boundaries=boundaries)
    return out.data


def oracle(v, p, X, pad, N, boundaries, n, clip=3):
    w = {k: t.data for k, t in p.named().items()}
    if v is AttentionVariant.MULTIHEAD_SOFTMAX:
        return oracles.multihead(X, w, pad, n)
    if v is AttentionVariant.PART_MASK:
        return oracles.multihead(X, w, pad, n, N=N)
    if v is AttentionVariant.RPE:
        return oracles.rpe(X, w, pad, n, clip)
    if v is AttentionVariant.RAB:
        return oracles.rab(X, w, pad, n, boundaries)
    kind = {
        AttentionVariant.ONEHEAD_SOFTMAX: "softmax",
        AttentionVariant.ONEHEAD_SIGMOID: "sigmoid",
        AttentionVariant.PART_BIAS: "bias",
        AttentionVariant.SHATTER: "shatter",
    }[v]
    return oracles.onehead(X, w, pad, N, kind)


def oracle_error(variant, rng, l, d, n):
    v, p, X, pad, N, b = instance(variant, rng, l, d, n)
    return float(np.max(np.abs(run(v, p, X, pad, N, b, n) - oracle(v, p, X, pad, N, b, n))))


def attention_grad_error(variant, rng, l=8, d=16, n=4):
    """Worst finite-difference relative error over all weights and the input."""
    with nx.precision("float64"):
        v, p, X, pad, N, b = instance(variant, rng, l, d, n, clip=4)
        Xt = nx.parameter(X)
        w = nx.constant(rng.normal(size=(1, l, d)))

        def loss():
            out = attend(v, Xt, p, pad[None], n=n, mask=N, rpe_clip=4, boundaries=b)
            return (out * w).sum()

        return nx.finite_diff_check(loss, list(p.named().values()) + [Xt])
