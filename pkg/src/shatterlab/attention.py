"""Attention layer variants as pure computations over (params, inputs).

All functions take ``X`` of shape ``(B, l, d)`` (a 2-D ``(l, d)`` input is
promoted) and a boolean ``pad`` of shape ``(B, l)`` that is true for valid
positions.  Output rows of padded queries are zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .partition import PartitionMask, bucket_index


class AttentionVariant(str, enum.Enum):
    MULTIHEAD_SOFTMAX = "multihead_softmax"
    PART_MASK = "part_mask"
    ONEHEAD_SOFTMAX = "onehead_softmax"
    ONEHEAD_SIGMOID = "onehead_sigmoid"
    PART_BIAS = "part_bias"
    SHATTER = "shatter"
    RPE = "rpe"
    RAB = "rab"

    @property
    def one_head(self) -> bool:
        return self in _ONE_HEAD

    @property
    def uses_mask(self) -> bool:
        return self in _MASKED

    @property
    def uses_partition_embeddings(self) -> bool:
        return self in (AttentionVariant.PART_BIAS, AttentionVariant.SHATTER)

    @property
    def sigmoid_scores(self) -> bool:
        return self in (AttentionVariant.ONEHEAD_SIGMOID, AttentionVariant.PART_BIAS, AttentionVariant.SHATTER)

    def scale(self, d: int, n: int) -> float:
        if self in (AttentionVariant.MULTIHEAD_SOFTMAX, AttentionVariant.PART_MASK, AttentionVariant.RAB):
            return math.sqrt(d / n)
        return math.sqrt(d)


_ONE_HEAD = frozenset(
    {
        AttentionVariant.ONEHEAD_SOFTMAX,
        AttentionVariant.ONEHEAD_SIGMOID,
        AttentionVariant.PART_BIAS,
        AttentionVariant.SHATTER,
    }
)
_MASKED = _ONE_HEAD | {AttentionVariant.PART_MASK}

NEG_INF = -np.inf


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_k: Tensor | None = None
    b_k: Tensor | None = None
    r: Tensor | None = None  # (n, d) partition embeddings
    rpe: Tensor | None = None  # (2c-1, d) relative position table
    rab: Tensor | None = None  # (m, n) bucket biases

    @classmethod
    def init(
        cls,
        variant: AttentionVariant,
        d: int,
        n: int,
        rng: np.random.Generator,
        std: float = 0.02,
        rpe_clip: int = 128,
        rab_buckets: int = 31,
        dtype=None,
    ) -> "AttentionParams":
        dtype = dtype or nx.default_dtype()

        def w(*shape):
            return nx.parameter(rng.normal(0.0, std, size=shape), dtype)

        def z(*shape):
            return nx.parameter(np.zeros(shape), dtype)

        p = cls(w_q=w(d, d), b_q=z(d), w_v=w(d, d), b_v=z(d), w_o=w(d, d), b_o=z(d))
        if not variant.one_head:
            p.w_k, p.b_k = w(d, d), z(d)
        if variant.uses_partition_embeddings:
            p.r = w(n, d)
        if variant is AttentionVariant.RPE:
            p.rpe = w(2 * rpe_clip - 1, d)
        if variant is AttentionVariant.RAB:
            p.rab = w(rab_buckets, n)
        return p

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "AttentionParams":
        return cls(**named)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare(X, pad):
    X = X if isinstance(X, Tensor) else nx.constant(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    B, l, _ = X.shape
    if pad is None:
        pad = np.ones((B, l), dtype=bool)
    pad = np.asarray(pad, dtype=bool).reshape(B, l)
    return X, pad, squeeze


def _finish(out: Tensor, pad: np.ndarray, squeeze: bool) -> Tensor:
    out = out * pad[..., None].astype(out.dtype)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def split_heads(x: Tensor, n: int) -> Tensor:
    """(B, l, d) -> (B, n, l, d/n): head h holds columns h*d/n:(h+1)*d/n."""
    B, l, d = x.shape
    return x.reshape(B, l, n, d // n).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, n, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, l, n * dh)


def _mask_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, PartitionMask) else np.asarray(mask)


def _key_mask(pad: np.ndarray) -> np.ndarray:
    """True where the key is padded; shaped (B, 1, l) to broadcast over query rows."""
    return ~pad[:, None, :]


# ---------------------------------------------------------------------------
# multi-head softmax family
# ---------------------------------------------------------------------------


def _multihead_scores(X, params, n, scale):
    d = X.shape[-1]
    if d % n:
        raise ValueError(f"hidden size {d} is not divisible by head count {n}")
    if params.w_k is None:
        raise ValueError("multi-head attention needs a key projection")
    Q = split_heads(_linear(X, params.w_q, params.b_q), n)
    K = split_heads(_linear(X, params.w_k, params.b_k), n)
    V = split_heads(_linear(X, params.w_v, params.b_v), n)
    S = (Q @ K.T) * (1.0 / scale)
    return Q, V, S


def attend_multihead_softmax(X, params: AttentionParams, pad=None, n: int = 1) -> Tensor:
    X, pad, squeeze = _prepare(X, pad)
    d = X.shape[-1]
    _, V, S = _multihead_scores(X, params, n, math.sqrt(d / n))
    A = nx.softmax(nx.masked_fill(S, _key_mask(pad)[:, None], NEG_INF), axis=-1)
    out = _linear(merge_heads(A @ V), params.w_o, params.b_o)
    return _finish(out, pad, squeeze)


def attend_part_mask(X, params: AttentionParams, pad=None, mask=None) -> Tensor:
    X, pad, squeeze = _prepare(X, pad)
    N = _mask_values(mask)
    n, l = N.shape[0], X.shape[1]
    if N.shape != (n, l, l):
        raise ValueError(f"mask shape {N.shape} does not match sequence length {l}")
    d = X.shape[-1]
    _, V, S = _multihead_scores(X, params, n, math.sqrt(d / n))
    A = nx.softmax(nx.masked_fill(S, _key_mask(pad)[:, None], NEG_INF), axis=-1) * N.astype(X.dtype)
    out = _linear(merge_heads(A @ V), params.w_o, params.b_o)
    return _finish(out, pad, squeeze)


def attention_weights_part_mask(X, params, pad=None, mask=None) -> np.ndarray:
    """The (B, n, l, l) weight tensor of the partition-masked multi-head variant."""
    X, pad, _ = _prepare(X, pad)
    N = _mask_values(mask)
    n, d = N.shape[0], X.shape[-1]
    _, _, S = _multihead_scores(X, params, n, math.sqrt(d / n))
    A = nx.softmax(nx.masked_fill(S, _key_mask(pad)[:, None], NEG_INF), axis=-1)
    return A.data * N


# ---------------------------------------------------------------------------
# one-head family
# ---------------------------------------------------------------------------


def _check_one_head(params: AttentionParams, mask) -> np.ndarray:
    if params.w_k is not None:
        raise ValueError("one-head attention must not carry a key projection")
    if mask is None:
        raise ValueError("one-head attention needs a partition mask")
    return _mask_values(mask)


def partition_bias(Q: Tensor, R: Tensor, mask) -> Tensor:
    """B[..., i, j] = sum_h (Q R^T)[..., i, h] * N[h, i, j]."""
    N = _mask_values(mask)
    QR = Q @ R.T  # (B, l, n)
    QR = QR.transpose(*range(QR.ndim - 2), QR.ndim - 1, QR.ndim - 2)  # (B, n, l)
    weighted = QR.reshape(*QR.shape, 1) * N.astype(Q.dtype)
    return weighted.sum(axis=-3)


def _onehead_sheet(X, params, pad, N, kind):
    """Score sheet (B, l, l) for the one-head variants."""
    d = X.shape[-1]
    Q = _linear(X, params.w_q, params.b_q)
    logits = (Q @ X.T) * (1.0 / math.sqrt(d))
    if kind in ("bias", "shatter"):
        if params.r is None:
            raise ValueError("partition embeddings R are required")
        logits = logits + partition_bias(Q, params.r, N)
    if kind == "softmax":
        return nx.softmax(nx.masked_fill(logits, _key_mask(pad), NEG_INF), axis=-1)
    sig = nx.sigmoid(logits) * _key_mask_float(pad, X.dtype)
    return nx.l2_normalize(sig, axis=-1)


def _key_mask_float(pad: np.ndarray, dtype) -> np.ndarray:
    return pad[:, None, :].astype(dtype)


def _onehead(X, params, pad, mask, kind):
    X, pad, squeeze = _prepare(X, pad)
    N = _check_one_head(params, mask)
    n, l, d = N.shape[0], X.shape[1], X.shape[-1]
    if N.shape != (n, l, l):
        raise ValueError(f"mask shape {N.shape} does not match sequence length {l}")
    if d % n:
        raise ValueError(f"hidden size {d} is not divisible by part count {n}")
    sheet = _onehead_sheet(X, params, pad, N, kind)
    A = sheet.reshape(sheet.shape[0], 1, l, l) * N.astype(X.dtype)  # (B, n, l, l)
    V = split_heads(_linear(X, params.w_v, params.b_v), n)
    ctx = merge_heads(A @ V)
    if kind == "shatter":
        a_part = A.sum(axis=-1).transpose(0, 2, 1)  # (B, l, n)
        v_part = params.r @ params.w_v  # (n, d)
        ctx = ctx + a_part @ v_part
    out = _linear(ctx, params.w_o, params.b_o)
    return _finish(out, pad, squeeze)


def attend_onehead_softmax(X, params: AttentionParams, pad=None, mask=None) -> Tensor:
    return _onehead(X, params, pad, mask, "softmax")


def attend_onehead_sigmoid(X, params: AttentionParams, pad=None, mask=None) -> Tensor:
    return _onehead(X, params, pad, mask, "sigmoid")


def attend_part_bias(X, params: AttentionParams, pad=None, mask=None) -> Tensor:
    return _onehead(X, params, pad, mask, "bias")


def attend_shatter(X, params: AttentionParams, pad=None, mask=None) -> Tensor:
    if params.r is None:
        raise ValueError("Shatter attention needs partition embeddings R")
    return _onehead(X, params, pad, mask, "shatter")


def onehead_weights(X, params, pad=None, mask=None, kind: str = "sigmoid") -> np.ndarray:
    """The (B, n, l, l) weight tensor of a one-head variant (for inspection and tests)."""
    X, pad, _ = _prepare(X, pad)
    N = _check_one_head(params, mask)
    sheet = _onehead_sheet(X, params, pad, N, kind)
    return sheet.data[:, None] * N


# ---------------------------------------------------------------------------
# relative position embeddings and relative attention bias
# ---------------------------------------------------------------------------


def relative_index(length: int, clip: int) -> np.ndarray:
    """idx[i, j] = clip(j - i) shifted into [0, 2c-1)."""
    pos = np.arange(length)
    rel = np.clip(pos[None, :] - pos[:, None], -(clip - 1), clip - 1)
    return rel + (clip - 1)


def attend_rpe(X, params: AttentionParams, pad=None, clip: int | None = None, n: int = 1) -> Tensor:
    """Keys and values for pair (i, j) use ``x_j + R[clip(j - i)]``; heads split as in multi-head."""
    X, pad, squeeze = _prepare(X, pad)
    if params.rpe is None:
        raise ValueError("RPE attention needs a relative position table")
    width = params.rpe.shape[0]
    if clip is None:
        clip = (width + 1) // 2
    if width != 2 * clip - 1:
        raise ValueError(f"RPE table has {width} rows, expected {2 * clip - 1}")
    d, l = X.shape[-1], X.shape[1]
    Q, V, S = _multihead_scores(X, params, n, 1.0)
    k_rel = split_heads((params.rpe @ params.w_k).reshape(1, width, d), n)  # (1, n, w, dh)
    v_rel = split_heads((params.rpe @ params.w_v).reshape(1, width, d), n)
    idx = relative_index(l, clip)
    S = (S + nx.gather_relative(Q @ k_rel.T, idx)) * (1.0 / math.sqrt(d))
    A = nx.softmax(nx.masked_fill(S, _key_mask(pad)[:, None], NEG_INF), axis=-1)
    ctx = A @ V + nx.scatter_relative(A, idx, width) @ v_rel
    out = _linear(merge_heads(ctx), params.w_o, params.b_o)
    return _finish(out, pad, squeeze)


def attend_rab(X, params: AttentionParams, pad=None, boundaries=None) -> Tensor:
    X, pad, squeeze = _prepare(X, pad)
    if params.rab is None:
        raise ValueError("RAB attention needs bucket weights")
    b = np.asarray(boundaries, dtype=np.float64)
    m, n = params.rab.shape
    if b.size != m + 1:
        raise ValueError(f"{b.size} boundaries given for {m} buckets (need {m + 1})")
    d, l = X.shape[-1], X.shape[1]
    _, V, S = _multihead_scores(X, params, n, math.sqrt(d / n))
    pos = np.arange(l)
    g = bucket_index(b, pos[None, :] - pos[:, None])
    bias = nx.gather_rows(params.rab, g).transpose(2, 0, 1)  # (n, l, l)
    A = nx.softmax(nx.masked_fill(S + bias, _key_mask(pad)[:, None], NEG_INF), axis=-1)
    out = _linear(merge_heads(A @ V), params.w_o, params.b_o)
    return _finish(out, pad, squeeze)


# ---------------------------------------------------------------------------
# dispatch and pooled classification
# ---------------------------------------------------------------------------


def attend(
    variant: AttentionVariant,
    X,
    params: AttentionParams,
    pad=None,
    *,
    n: int,
    mask=None,
    rpe_clip: int | None = None,
    boundaries=None,
) -> Tensor:
    v = AttentionVariant(variant)
    if v is AttentionVariant.MULTIHEAD_SOFTMAX:
        return attend_multihead_softmax(X, params, pad, n)
    if v is AttentionVariant.PART_MASK:
        return attend_part_mask(X, params, pad, mask)
    if v is AttentionVariant.ONEHEAD_SOFTMAX:
        return attend_onehead_softmax(X, params, pad, mask)
    if v is AttentionVariant.ONEHEAD_SIGMOID:
        return attend_onehead_sigmoid(X, params, pad, mask)
    if v is AttentionVariant.PART_BIAS:
        return attend_part_bias(X, params, pad, mask)
    if v is AttentionVariant.SHATTER:
        return attend_shatter(X, params, pad, mask)
    if v is AttentionVariant.RPE:
        return attend_rpe(X, params, pad, rpe_clip, n)
    if v is AttentionVariant.RAB:
        return attend_rab(X, params, pad, boundaries)
    raise ValueError(f"unknown variant {variant}")  # pragma: no cover


def classify_attend(y: Tensor, X: Tensor, params: AttentionParams, variant, pad=None, n: int = 1) -> Tensor:
    """Pool ``X`` (B, l, d) with a position-free query ``y`` (B, 1, d); returns (B, 1, d).

    Variants with a key projection pool by multi-head softmax; one-head softmax
    uses ``X`` as keys; the sigmoid family applies one L2-normalized sigmoid
    weighting to every value block.  No partition mask or bias is involved.
    """
    v = AttentionVariant(variant)
    X, pad, _ = _prepare(X, pad)
    d = X.shape[-1]
    q = _linear(y, params.w_q, params.b_q)
    keymask = _key_mask(pad)
    if params.w_k is not None:
        Q = split_heads(q, n)
        K = split_heads(_linear(X, params.w_k, params.b_k), n)
        V = split_heads(_linear(X, params.w_v, params.b_v), n)
        s = (Q @ K.T) * (1.0 / math.sqrt(d / n))
        a = nx.softmax(nx.masked_fill(s, keymask[:, None], NEG_INF), axis=-1)
        ctx = merge_heads(a @ V)
    else:
        V = _linear(X, params.w_v, params.b_v)
        s = (q @ X.T) * (1.0 / math.sqrt(d))
        if v.sigmoid_scores:
            a = nx.l2_normalize(nx.sigmoid(s) * _key_mask_float(pad, X.dtype), axis=-1)
        else:
            a = nx.softmax(nx.masked_fill(s, keymask, NEG_INF), axis=-1)
        ctx = a @ V
    return _linear(ctx, params.w_o, params.b_o)
