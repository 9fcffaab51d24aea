"""Dense tensors with reverse-mode differentiation over a small fixed op set.

Every value is a numpy array wrapped in :class:`Tensor`.  Ops record their
parents and a backward closure; :func:`backward` walks the graph in a fixed
topological order so repeated passes give bit-identical gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from . import kernels

_DTYPE = np.dtype(np.float32)

LAYER_NORM_EPS = 1e-12


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``float64`` for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make numpy defer to Tensor operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DTYPE), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _DTYPE))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DTYPE))


def _make(value: np.ndarray, parents: tuple[Tensor, ...], back, op: str) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.data.dtype != a.data.dtype and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over leading axes, with numpy broadcasting of batch axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[x] for x in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, parts, back, "concat")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Entries where ``mask`` is true are replaced by the constant ``value``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Subtract-max softmax; ``-inf`` entries map to exactly 0 and an all ``-inf`` slice to zeros."""
    data = x.data
    m = np.max(data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y.astype(data.dtype, copy=False), (x,), back, "softmax")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """x / sqrt(sum(x^2) + eps^2) along ``axis``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    data = x.data
    r = np.sqrt((data * data).sum(axis=axis, keepdims=True) + eps * eps)
    y = data / r

    def back(g):
        return (g / r - y * (g * y).sum(axis=axis, keepdims=True) / r,)

    return _make(y, (x,), back, "l2_normalize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit (biased) variance, then scale and shift."""
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    xc = data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out.astype(data.dtype, copy=False), (x, gain, bias), back, "layer_norm")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    data = x.data
    cdf = 0.5 * (1.0 + erf(data * _SQRT_HALF))
    out = data * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * data * data)
        return ((g * (cdf + data * pdf)).astype(data.dtype, copy=False),)

    return _make(out.astype(data.dtype, copy=False), (x,), back, "gelu")


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def back(g):
        flat = g.reshape(-1, *table.shape[1:]).reshape(idx.size, -1)
        grad = kernels.scatter_add_rows(flat, idx.ravel(), table.shape[0])
        return (grad.reshape(table.shape),)

    return _make(out, (table,), back, "gather_rows")


def gather_relative(rel: Tensor, idx: np.ndarray) -> Tensor:
    """Relative-offset layout to absolute layout: out[..., i, j] = rel[..., i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.int64)
    width = rel.shape[-1]
    out = kernels.gather_relative(rel.data, idx)
    return _make(out, (rel,), lambda g: (kernels.scatter_relative(g, idx, width),), "gather_relative")


def scatter_relative(a: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Absolute layout to relative layout, summing entries that share an offset slot."""
    idx = np.asarray(idx, dtype=np.int64)
    out = kernels.scatter_relative(a.data, idx, width)
    return _make(out, (a,), lambda g: (kernels.gather_relative(g, idx),), "scatter_relative")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean token cross entropy over entries whose label is not ``ignore_index``."""
    labels = np.asarray(labels, dtype=np.int64)
    data = logits.data
    if data.shape[:-1] != labels.shape:
        raise ValueError(f"logits {data.shape} do not match labels {labels.shape}")
    flat = data.reshape(-1, data.shape[-1])
    lab = labels.ravel()
    keep = lab != ignore_index
    count = int(keep.sum())
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe = np.where(keep, lab, 0)
    picked = logp[np.arange(lab.size), safe]
    total = -(picked * keep).sum()
    loss = total / max(count, 1)

    def back(g):
        p = np.exp(logp)
        p[np.arange(lab.size), safe] -= 1.0
        p *= keep[:, None]
        p *= g / max(count, 1)
        return (p.reshape(data.shape).astype(data.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=data.dtype), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient map for ``params`` (zero arrays for parameters the loss does not reach)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The relative
    error for each coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    exactly-zero gradients (e.g. key biases under softmax) from dividing roundoff by zero.
    """
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in plist:
        if p.dtype != np.float64:
            raise ValueError("finite_diff_check expects float64 parameters")
        p.grad = None
    backward(f())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
    worst = 0.0
    for p, a in zip(plist, analytic):
        flat = p.data.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num), floor)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst
