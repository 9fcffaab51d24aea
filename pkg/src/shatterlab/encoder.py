"""Encoder assembly: embeddings, the post-LN layer stack, MLM head, classifiers, length extension."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import container
from . import numerics as nx
from .attention import AttentionParams, AttentionVariant, attend, classify_attend
from .config import ModelConfig
from .numerics import Tensor
from .partition import build_mask

ATTN_FIELDS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "r", "rpe", "rab")


class EncoderParams:
    """Flat, ordered name -> Tensor store for every trainable array of a model."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def attention(self, k: int) -> AttentionParams:
        prefix = f"layers.{k}.attn."
        named = {f: self.tensors[prefix + f] for f in ATTN_FIELDS if prefix + f in self.tensors}
        return AttentionParams.from_named(named)

    def layer(self, k: int) -> "LayerParams":
        p = f"layers.{k}."
        t = self.tensors
        return LayerParams(
            attn=self.attention(k),
            ln1=(t[p + "ln1.gain"], t[p + "ln1.bias"]),
            w1=t[p + "ffn.w1"],
            b1=t[p + "ffn.b1"],
            w2=t[p + "ffn.w2"],
            b2=t[p + "ffn.b2"],
            ln2=(t[p + "ln2.gain"], t[p + "ln2.bias"]),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self, dtype=None) -> "EncoderParams":
        dtype = dtype or nx.default_dtype()
        return EncoderParams({k: nx.parameter(v.data.copy(), dtype) for k, v in self.tensors.items()})


@dataclass
class LayerParams:
    attn: AttentionParams
    ln1: tuple[Tensor, Tensor]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2: tuple[Tensor, Tensor]


@dataclass
class HiddenStates:
    states: list[Tensor]  # X^0 .. X^L, each (B, l, d)
    pad: np.ndarray  # (B, l) validity

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> Tensor:
        return self.states[k]

    @property
    def last(self) -> Tensor:
        return self.states[-1]


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> EncoderParams:
    dtype = dtype or nx.default_dtype()
    rng = np.random.default_rng(seed)
    d, std = config.hidden, config.init_std
    t: dict[str, Tensor] = {}

    def normal(*shape):
        return nx.parameter(rng.normal(0.0, std, size=shape), dtype)

    def zeros(*shape):
        return nx.parameter(np.zeros(shape), dtype)

    def ones(*shape):
        return nx.parameter(np.ones(shape), dtype)

    t["embed.word"] = normal(config.vocab_size, d)
    if config.use_position_embeddings:
        t["embed.pos"] = normal(config.max_len, d)
    t["embed.ln.gain"], t["embed.ln.bias"] = ones(d), zeros(d)
    for k in range(config.num_layers):
        p = f"layers.{k}."
        attn = AttentionParams.init(
            config.attention,
            d,
            config.parts,
            rng,
            std=std,
            rpe_clip=config.rpe_clip,
            rab_buckets=config.rab_rows if config.attention is AttentionVariant.RAB else 1,
            dtype=dtype,
        )
        for name, val in attn.named().items():
            t[p + "attn." + name] = val
        t[p + "ln1.gain"], t[p + "ln1.bias"] = ones(d), zeros(d)
        t[p + "ffn.w1"], t[p + "ffn.b1"] = normal(d, config.ffn), zeros(config.ffn)
        t[p + "ffn.w2"], t[p + "ffn.b2"] = normal(config.ffn, d), zeros(d)
        t[p + "ln2.gain"], t[p + "ln2.bias"] = ones(d), zeros(d)
    t["mlm.w"], t["mlm.b"] = normal(d, d), zeros(d)
    t["mlm.ln.gain"], t["mlm.ln.bias"] = ones(d), zeros(d)
    t["mlm.out_bias"] = zeros(config.vocab_size)
    t["pool.seed"] = normal(d)
    if config.num_classes:
        t["cls.w"], t["cls.b"] = normal(d, config.num_classes), zeros(config.num_classes)
    return EncoderParams(t)


def add_classifier(params: EncoderParams, config: ModelConfig, num_classes: int, seed: int = 0) -> tuple[EncoderParams, ModelConfig]:
    rng = np.random.default_rng(seed)
    t = dict(params.tensors)
    t["cls.w"] = nx.parameter(rng.normal(0.0, config.init_std, size=(config.hidden, num_classes)))
    t["cls.b"] = nx.parameter(np.zeros(num_classes))
    return EncoderParams(t), config.replace(num_classes=num_classes)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _as_batch(tokens, pad):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if pad is None:
        pad = np.ones(tokens.shape, dtype=bool)
    pad = np.asarray(pad, dtype=bool).reshape(tokens.shape)
    return tokens.astype(np.int64), pad


def embed_input(tokens, config: ModelConfig, params: EncoderParams) -> Tensor:
    """x0_i = layernorm(E[w_i] (+ P[i] when absolute positions are enabled)); shape (B, l, d)."""
    tokens, _ = _as_batch(tokens, None)
    l = tokens.shape[1]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if l > config.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {config.max_len}")
    x = nx.gather_rows(params["embed.word"], tokens)
    if config.use_position_embeddings:
        x = x + nx.gather_rows(params["embed.pos"], np.arange(l))
    return nx.layer_norm(x, params["embed.ln.gain"], params["embed.ln.bias"])


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def feed_forward(h: Tensor, lp: LayerParams) -> Tensor:
    return nx.gelu(h @ lp.w1 + lp.b1) @ lp.w2 + lp.b2


def layer_forward(
    X: Tensor,
    lp: LayerParams,
    config: ModelConfig,
    pad: np.ndarray,
    mask=None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-LN block: h = LN(X + attn(X)); out = LN(h + FFN(h))."""
    a = attend(
        config.attention,
        X,
        lp.attn,
        pad,
        n=config.parts,
        mask=mask,
        rpe_clip=config.rpe_clip,
        boundaries=config.rab_boundaries() if config.attention is AttentionVariant.RAB else None,
    )
    h = nx.layer_norm(X + _dropout(a, config.dropout, rng), *lp.ln1)
    return nx.layer_norm(h + _dropout(feed_forward(h, lp), config.dropout, rng), *lp.ln2)


def layer_mask(config: ModelConfig, length: int, k: int):
    spec = config.partition_spec()
    return None if spec is None else build_mask(length, k, spec)


def encode(tokens, pad, config: ModelConfig, params: EncoderParams, rng=None) -> HiddenStates:
    tokens, pad = _as_batch(tokens, pad)
    l = tokens.shape[1]
    X = _dropout(embed_input(tokens, config, params), config.dropout, rng)
    states = [X]
    for k in range(config.num_layers):
        X = layer_forward(X, params.layer(k), config, pad, layer_mask(config, l, k), rng)
        states.append(X)
    return HiddenStates(states, pad)


def _rows(X: Tensor, flat_idx: np.ndarray) -> Tensor:
    B, l, d = X.shape
    return nx.gather_rows(X.reshape(B * l, d), flat_idx)


def mlm_head(rows: Tensor, params: EncoderParams) -> Tensor:
    h = rows @ params["mlm.w"] + params["mlm.b"]
    h = nx.layer_norm(h, params["mlm.ln.gain"], params["mlm.ln.bias"])
    return h @ params["embed.word"].T + params["mlm.out_bias"]


def mlm_logits(XL: Tensor, positions, params: EncoderParams) -> Tensor:
    """Logits (M, vocab) at the masked slots; ``positions`` is a boolean (B, l) array."""
    positions = np.asarray(positions, dtype=bool)
    if XL.ndim == 2:
        XL = XL.reshape(1, *XL.shape)
    positions = positions.reshape(XL.shape[:2])
    return mlm_head(_rows(XL, np.flatnonzero(positions)), params)


def classify_cls(XL: Tensor, params: EncoderParams) -> Tensor:
    """Class scores from the position-0 ([CLS]) state; (B, classes)."""
    if XL.ndim == 2:
        XL = XL.reshape(1, *XL.shape)
    B, l, _ = XL.shape
    return _rows(XL, np.arange(B) * l) @ params["cls.w"] + params["cls.b"]


def pooled_vector(states: HiddenStates, params: EncoderParams, config: ModelConfig) -> Tensor:
    """y^L from the learnt seed, re-attending over each layer's input states."""
    pad = states.pad
    B, d = pad.shape[0], config.hidden
    y = params["pool.seed"].reshape(1, 1, d) + np.zeros((B, 1, d), dtype=params["pool.seed"].dtype)
    for k in range(config.num_layers):
        lp = params.layer(k)
        ybar = classify_attend(y, states[k], lp.attn, config.attention, pad, n=config.parts)
        h = nx.layer_norm(y + ybar, *lp.ln1)
        y = nx.layer_norm(h + feed_forward(h, lp), *lp.ln2)
    return y.reshape(B, d)


def classify_pooled(states: HiddenStates, params: EncoderParams, config: ModelConfig) -> Tensor:
    return pooled_vector(states, params, config) @ params["cls.w"] + params["cls.b"]


def classify(states: HiddenStates, params: EncoderParams, config: ModelConfig, strategy: str | None = None) -> Tensor:
    strategy = strategy or config.cls_strategy
    if strategy == "cls":
        return classify_cls(states.last, params)
    if strategy == "pooled":
        return classify_pooled(states, params, config)
    raise ValueError(f"unknown classification strategy {strategy!r}")


# ---------------------------------------------------------------------------
# length extension
# ---------------------------------------------------------------------------


def extend_max_length(
    params: EncoderParams, config: ModelConfig, new_len: int, seed: int = 0
) -> tuple[EncoderParams, ModelConfig]:
    """Grow the supported length.  Only absolute position tables gain (seeded random) rows."""
    if new_len < config.max_len:
        raise ValueError(f"new length {new_len} is shorter than max_len {config.max_len}")
    t = dict(params.tensors)
    if config.use_position_embeddings and new_len > config.max_len:
        rng = np.random.default_rng(seed)
        old = t["embed.pos"]
        extra = rng.normal(0.0, config.init_std, size=(new_len - config.max_len, config.hidden))
        t["embed.pos"] = nx.parameter(np.concatenate([old.data, extra.astype(old.dtype)]), old.dtype)
    return EncoderParams(t), config.replace(max_len=new_len)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    config: ModelConfig,
    params: EncoderParams,
    *,
    step: int = 0,
    seed: int = 0,
    extra_manifest: dict | None = None,
    extra_blobs: dict[str, np.ndarray] | None = None,
) -> None:
    manifest = {"format": "shatterlab-checkpoint", "config": config.to_dict(), "step": step, "seed": seed}
    manifest.update(extra_manifest or {})
    blobs = {f"param.{k}": v.data for k, v in params.items()}
    blobs.update(extra_blobs or {})
    container.save(path, container.CHECKPOINT_MAGIC, manifest, blobs)


def load_checkpoint(path, dtype=None) -> tuple[ModelConfig, EncoderParams, dict, dict[str, np.ndarray]]:
    """Returns (config, params, manifest, non-parameter blobs)."""
    manifest, blobs = container.load(path, container.CHECKPOINT_MAGIC)
    config = ModelConfig.from_dict(manifest["config"])
    dtype = dtype or nx.default_dtype()
    params = {k[len("param.") :]: nx.parameter(v, dtype) for k, v in blobs.items() if k.startswith("param.")}
    rest = {k: v for k, v in blobs.items() if not k.startswith("param.")}
    return config, EncoderParams(params), manifest, rest
