"""Desk-scale MLM pretraining and toy finetuning."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container
from . import numerics as nx
from .config import CLS, MASK, NUM_SPECIAL, PAD, SEP, ModelConfig
from .encoder import (
    EncoderParams,
    add_classifier,
    classify,
    encode,
    init_params,
    load_checkpoint,
    mlm_logits,
    save_checkpoint,
)

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[MASK]")
UNK_TOKEN = "[UNK]"
UNK = NUM_SPECIAL  # first ordinary id is reserved for unknown words
METRICS_HEADER = ("step", "train_loss", "valid_loss", "lr", "ms_per_step")
PACKING_POLICY = "greedy: documents joined by [SEP], cut into chunks of max_len-1, each prefixed by [CLS]"


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite."""


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def tokenize(line: str) -> list[str]:
    return line.lower().split()


@dataclass
class Corpus:
    documents: list[np.ndarray]
    vocab: list[str]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_lines(cls, lines: Iterable[str], max_vocab: int = 1000) -> "Corpus":
        docs = [tokenize(line) for line in lines]
        docs = [d for d in docs if d]
        counts = Counter(w for d in docs for w in d)
        budget = max(max_vocab - NUM_SPECIAL - 1, 0)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
        vocab = list(SPECIAL_TOKENS) + [UNK_TOKEN] + [w for w, _ in ranked]
        index = {w: i for i, w in enumerate(vocab)}
        ids = [np.array([index.get(w, UNK) for w in d], dtype=np.int32) for d in docs]
        return cls(ids, vocab)

    @classmethod
    def from_text(cls, path, max_vocab: int = 1000) -> "Corpus":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, max_vocab)

    def encode_lines(self, lines: Iterable[str]) -> "Corpus":
        """Tokenize more text with this corpus' vocabulary."""
        index = {w: i for i, w in enumerate(self.vocab)}
        docs = [np.array([index.get(w, UNK) for w in tokenize(x)], dtype=np.int32) for x in lines]
        return Corpus([d for d in docs if d.size], self.vocab)

    def split(self, valid_fraction: float = 0.1) -> tuple["Corpus", "Corpus"]:
        """Hold out the trailing documents as a validation slice."""
        n_valid = max(1, int(round(len(self.documents) * valid_fraction)))
        if n_valid >= len(self.documents):
            raise ValueError("corpus too small to split")
        return Corpus(self.documents[:-n_valid], self.vocab), Corpus(self.documents[-n_valid:], self.vocab)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.vocab).encode("utf-8"))
        for d in self.documents:
            h.update(d.astype("<i4").tobytes())
        return h.hexdigest()[:16]

    def save_cache(self, path) -> None:
        lengths = np.array([d.size for d in self.documents], dtype=np.int32)
        flat = np.concatenate(self.documents) if self.documents else np.zeros(0, dtype=np.int32)
        manifest = {"format": "shatterlab-tokens", "vocab": self.vocab, "documents": len(self.documents)}
        container.save(path, container.TOKENS_MAGIC, manifest, {"lengths": lengths, "ids": flat})

    @classmethod
    def load_cache(cls, path) -> "Corpus":
        manifest, blobs = container.load(path, container.TOKENS_MAGIC)
        bounds = np.cumsum(blobs["lengths"])[:-1]
        docs = np.split(blobs["ids"], bounds) if blobs["lengths"].size else []
        return cls([d.astype(np.int32) for d in docs], list(manifest["vocab"]))

    def pack(self, length: int) -> "SequenceSet":
        if not self.documents:
            raise ValueError("corpus is empty")
        stream: list[int] = []
        for d in self.documents:
            stream.extend(int(x) for x in d)
            stream.append(SEP)
        body = length - 1
        rows = []
        for start in range(0, len(stream), body):
            chunk = stream[start : start + body]
            rows.append([CLS] + chunk + [PAD] * (body - len(chunk)))
        tokens = np.array(rows, dtype=np.int64)
        return SequenceSet(tokens, tokens != PAD)


@dataclass
class SequenceSet:
    tokens: np.ndarray  # (N, l)
    pad: np.ndarray  # (N, l), true where valid

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskingConfig:
    fraction: float = 0.15
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # [MASK], random token, unchanged

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("mask fraction must lie in [0, 1]")
        if len(self.split) != 3 or any(not 0.0 <= s <= 1.0 for s in self.split):
            raise ValueError("split needs three fractions in [0, 1]")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def mask_tokens(
    tokens: np.ndarray, pad: np.ndarray, masking: MaskingConfig, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Select ``fraction`` of each row's non-special positions; returns (inputs, labels).

    Rows with fewer than two non-special tokens are left unmasked.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    inputs = tokens.copy()
    labels = np.full(tokens.shape, nx.IGNORE_INDEX, dtype=np.int64)
    eligible = np.asarray(pad, dtype=bool) & (tokens >= NUM_SPECIAL)
    p_mask, p_rand, _ = masking.split
    for r in range(tokens.shape[0]):
        cand = np.flatnonzero(eligible[r])
        if cand.size < 2 or masking.fraction == 0.0:
            continue
        k = int(round(masking.fraction * cand.size))
        if k == 0:
            continue
        chosen = np.sort(rng.choice(cand, size=k, replace=False))
        labels[r, chosen] = tokens[r, chosen]
        u = rng.random(k)
        rand_ids = rng.integers(NUM_SPECIAL, vocab_size, size=k)
        inputs[r, chosen] = np.where(u < p_mask, MASK, np.where(u < p_mask + p_rand, rand_ids, tokens[r, chosen]))
    return inputs, labels


def sample_mlm_batch(
    data: SequenceSet, masking: MaskingConfig, batch_size: int, rng, vocab_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``batch_size`` rows and mask them; returns (inputs, labels, pad)."""
    if len(data) == 0:
        raise ValueError("no sequences to sample from")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    rows = rng.integers(0, len(data), size=batch_size)
    inputs, labels = mask_tokens(data.tokens[rows], data.pad[rows], masking, rng, vocab_size)
    return inputs, labels, data.pad[rows]


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 10_000
    total_steps: int = 1_000_000

    def __post_init__(self):
        if self.peak_lr <= 0 or self.warmup_steps < 0 or self.total_steps <= 0:
            raise ValueError("schedule values must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup cannot exceed total steps")


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup 0 -> peak, then linear decay to 0 at ``total_steps``."""
    w, t, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if step <= 0:
        return 0.0
    if step < w:
        return peak * step / w
    if step >= t:
        return 0.0
    if t == w:
        return peak
    return peak * (t - step) / (t - w)


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


DECAYED_LEAVES = frozenset({"w_q", "w_k", "w_v", "w_o", "w1", "w2", "w"})


def decays(name: str) -> bool:
    """Weight matrices decay; embeddings, layer norms, biases and relative tables do not."""
    return not name.startswith("embed.") and name.rsplit(".", 1)[-1] in DECAYED_LEAVES


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: EncoderParams | dict, grads: dict[str, np.ndarray], state: AdamState, opt: OptimizerConfig, lr: float
) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, applied in place."""
    tensors = params.tensors if isinstance(params, EncoderParams) else params
    if set(grads) - set(tensors):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(tensors))[:3]}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    t = state.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, g in grads.items():
        p = tensors[name].data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay and decays(name):
            update = update + opt.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    eval_every: int = 100
    checkpoint_every: int = 500
    eval_batches: int = 8
    mask_fraction: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, min(self.warmup_steps, max(self.steps, 1)), max(self.steps, 1))

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(weight_decay=self.weight_decay)

    def masking(self) -> MaskingConfig:
        return MaskingConfig(self.mask_fraction, tuple(self.mask_split))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "mask_split" in data:
            data["mask_split"] = tuple(data["mask_split"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mask_split"] = list(self.mask_split)
        return out


def mlm_loss(config: ModelConfig, params: EncoderParams, inputs, labels, pad, rng=None) -> nx.Tensor:
    states = encode(inputs, pad, config, params, rng=rng)
    sel = labels != nx.IGNORE_INDEX
    return nx.cross_entropy(mlm_logits(states.last, sel, params), labels[sel])


def evaluate_mlm(
    config: ModelConfig,
    params: EncoderParams,
    data: SequenceSet,
    masking: MaskingConfig = MaskingConfig(),
    batch_size: int = 32,
    max_batches: int | None = None,
    seed: int = 12345,
) -> float:
    """Token-weighted MLM loss over ``data`` with a fixed masking seed."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    n = len(data)
    limit = math.ceil(n / batch_size) if max_batches is None else min(max_batches, math.ceil(n / batch_size))
    for b in range(limit):
        rows = slice(b * batch_size, min(n, (b + 1) * batch_size))
        inputs, labels = mask_tokens(data.tokens[rows], data.pad[rows], masking, rng, config.vocab_size)
        k = int((labels != nx.IGNORE_INDEX).sum())
        if k == 0:
            continue
        loss = mlm_loss(config, params, inputs, labels, data.pad[rows])
        total += float(loss.data) * k
        count += k
    return total / max(count, 1)


def _format_float(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["step"]] + [_format_float(r[k]) for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "step": int(rec["step"]),
                    **{k: (float(rec[k]) if rec[k] != "" else None) for k in METRICS_HEADER[1:]},
                }
            )
    return rows


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, step, train_loss, valid_loss, lr, ms_per_step) -> None:
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("metrics steps must increase")
        self.rows.append(
            {"step": step, "train_loss": train_loss, "valid_loss": valid_loss, "lr": lr, "ms_per_step": ms_per_step}
        )

    def to_csv(self) -> str:
        return metrics_csv(self.rows)

    @property
    def valid_losses(self) -> list[float]:
        return [r["valid_loss"] for r in self.rows]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train(
    config: ModelConfig,
    train_data: SequenceSet,
    valid_data: SequenceSet,
    tc: TrainConfig,
    out_dir,
    *,
    seed: int = 0,
    deterministic: bool = True,
    resume: bool = False,
    params: EncoderParams | None = None,
    stop_at: int | None = None,
) -> tuple[MetricsLog, EncoderParams]:
    """MLM training loop writing ``metrics.csv`` and ``checkpoint.bin`` into ``out_dir``.

    ``stop_at`` ends the loop early (after checkpointing) as if the process had
    been killed, which is how resumption is exercised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    schedule, opt, masking = tc.schedule(), tc.optimizer(), tc.masking()
    metrics = MetricsLog()
    acc = {"loss_sum": 0.0, "count": 0}
    if resume and ckpt.exists():
        config, params, manifest, blobs = load_checkpoint(ckpt)
        state = AdamState(
            manifest["step"],
            {k[6:]: v for k, v in blobs.items() if k.startswith("opt.m.")},
            {k[6:]: v for k, v in blobs.items() if k.startswith("opt.v.")},
        )
        rng = _restore_rng(manifest["rng"])
        acc = manifest["accumulator"]
        metrics.rows = [r for r in read_metrics(out / "metrics.csv") if r["step"] <= state.step]
        log.info("resumed from step %d", state.step)
    else:
        params = params if params is not None else init_params(config, seed)
        state = AdamState()
        rng = np.random.default_rng(seed)

    def checkpoint():
        blobs = {f"opt.m.{k}": v for k, v in state.m.items()}
        blobs.update({f"opt.v.{k}": v for k, v in state.v.items()})
        save_checkpoint(
            ckpt,
            config,
            params,
            step=state.step,
            seed=seed,
            extra_manifest={"rng": _rng_state(rng), "accumulator": acc, "train": tc.to_dict()},
            extra_blobs=blobs,
        )

    def write_metrics():
        container.atomic_write_text(out / "metrics.csv", metrics.to_csv())

    if state.step == 0:
        checkpoint()
        write_metrics()
    drop_rng = np.random.default_rng(seed + 1) if config.dropout > 0 else None
    t_last = time.perf_counter()
    steps_since = 0
    while state.step < tc.steps:
        if stop_at is not None and state.step >= stop_at:
            break
        step = state.step + 1
        inputs, labels, pad = sample_mlm_batch(train_data, masking, tc.batch_size, rng, config.vocab_size)
        loss = mlm_loss(config, params, inputs, labels, pad, drop_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        grads = nx.grad(loss, params.tensors)
        lr = lr_at(step, schedule)
        adam_step(params, grads, state, opt, lr)
        acc["loss_sum"] += value
        acc["count"] += 1
        steps_since += 1
        if step % tc.eval_every == 0 or step == tc.steps:
            now = time.perf_counter()
            ms = None if deterministic else 1000.0 * (now - t_last) / max(steps_since, 1)
            valid = evaluate_mlm(config, params, valid_data, masking, tc.batch_size, tc.eval_batches)
            metrics.append(step, acc["loss_sum"] / max(acc["count"], 1), valid, lr, ms)
            acc = {"loss_sum": 0.0, "count": 0}
            write_metrics()
            t_last, steps_since = time.perf_counter(), 0
        if step % tc.checkpoint_every == 0 or step == tc.steps:
            checkpoint()
    if stop_at is not None and state.step < tc.steps:
        checkpoint()
    return metrics, params


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

TASK_KINDS = ("position_probe", "order_pair", "copy_mlm")


@dataclass
class SyntheticTask:
    kind: str
    tokens: np.ndarray  # (N, l)
    pad: np.ndarray
    labels: np.ndarray | None  # (N,) class ids; None for MLM tasks
    num_classes: int
    vocab_size: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def sequences(self) -> SequenceSet:
        return SequenceSet(self.tokens, self.pad)

    def subset(self, rows) -> "SyntheticTask":
        labels = None if self.labels is None else self.labels[rows]
        return SyntheticTask(self.kind, self.tokens[rows], self.pad[rows], labels, self.num_classes, self.vocab_size)


def _position_probe(rng, n, length, vocab, num_classes, probe_offset):
    cls_ids = NUM_SPECIAL + np.arange(num_classes)
    filler = np.arange(NUM_SPECIAL + num_classes, vocab)
    if filler.size == 0 or length < num_classes + 2:
        raise ValueError("vocabulary or length too small for position_probe")
    tokens = np.empty((n, length), dtype=np.int64)
    tokens[:, 0] = CLS
    tokens[:, 1:] = rng.choice(filler, size=(n, length - 1))
    labels = rng.integers(0, num_classes, size=n)
    for r in range(n):
        tokens[r, probe_offset] = cls_ids[labels[r]]
        others = [p for p in range(1, length) if p != probe_offset]
        spots = rng.choice(others, size=num_classes - 1, replace=False)
        rest = np.delete(cls_ids, labels[r])
        tokens[r, spots] = rng.permutation(rest)
    return tokens, labels


def _order_pair(rng, n, length, vocab):
    a, b = NUM_SPECIAL, NUM_SPECIAL + 1
    filler = np.arange(NUM_SPECIAL + 2, vocab)
    tokens = np.empty((n, length), dtype=np.int64)
    tokens[:, 0] = CLS
    tokens[:, 1:] = rng.choice(filler, size=(n, length - 1))
    labels = np.empty(n, dtype=np.int64)
    for r in range(n):
        i, j = rng.choice(np.arange(1, length), size=2, replace=False)
        tokens[r, i], tokens[r, j] = a, b
        labels[r] = int(i < j)
    return tokens, labels


def successor_table(vocab: int, seed: int) -> np.ndarray:
    """A fixed random cyclic successor map over the ordinary ids."""
    ids = np.arange(NUM_SPECIAL, vocab)
    order = np.random.default_rng(seed).permutation(ids)
    succ = np.arange(vocab)
    succ[order] = np.roll(order, -1)
    return succ


def _copy_mlm(rng, n, length, vocab, restart, table_seed):
    succ = successor_table(vocab, table_seed)
    tokens = np.empty((n, length), dtype=np.int64)
    tokens[:, 0] = CLS
    for r in range(n):
        cur = rng.integers(NUM_SPECIAL, vocab)
        for i in range(1, length):
            if i > 1:
                cur = rng.integers(NUM_SPECIAL, vocab) if rng.random() < restart else succ[cur]
            tokens[r, i] = cur
    return tokens


def synthetic_task(
    kind: str,
    seed: int = 0,
    *,
    n: int = 2000,
    length: int = 32,
    vocab_size: int = 64,
    num_classes: int = 4,
    probe_offset: int = 1,
    restart: float = 0.1,
    table_seed: int = 0,
) -> SyntheticTask:
    """Order-sensitive toy datasets where a bag of words carries no label signal.

    ``position_probe``: every class token appears exactly once; the label is the one
    at ``probe_offset`` after [CLS].  ``order_pair``: does token a precede token b.
    ``copy_mlm``: chains of a fixed successor map (restarting with probability
    ``restart``), so a masked token is recoverable from its neighbours' identities
    at offsets -1/+1; the map depends only on ``table_seed``.
    """
    rng = np.random.default_rng(seed)
    if kind == "position_probe":
        tokens, labels = _position_probe(rng, n, length, vocab_size, num_classes, probe_offset)
        classes = num_classes
    elif kind == "order_pair":
        tokens, labels = _order_pair(rng, n, length, vocab_size)
        classes = 2
    elif kind == "copy_mlm":
        tokens, labels, classes = _copy_mlm(rng, n, length, vocab_size, restart, table_seed), None, 0
    else:
        raise ValueError(f"unknown task kind {kind!r}; choose from {TASK_KINDS}")
    pad = np.ones(tokens.shape, dtype=bool)
    return SyntheticTask(kind, tokens, pad, labels, classes, vocab_size)


def toy_corpus_lines(seed: int = 0, documents: int = 400, vocab_words: int = 50, branching: int = 2) -> list[str]:
    """Plain-text documents from a sparse bigram chain: each word has ``branching`` successors."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_words)]
    succ = np.array([rng.choice(vocab_words, size=branching, replace=False) for _ in range(vocab_words)])
    lines = []
    for _ in range(documents):
        length = int(rng.integers(20, 60))
        cur = int(rng.integers(vocab_words))
        out = [words[cur]]
        for _ in range(length - 1):
            cur = int(succ[cur, rng.integers(branching)])
            out.append(words[cur])
        lines.append(" ".join(out))
    return lines


# ---------------------------------------------------------------------------
# classification finetuning
# ---------------------------------------------------------------------------


def classification_loss(config, params, task: SyntheticTask, rows, strategy, rng=None) -> nx.Tensor:
    states = encode(task.tokens[rows], task.pad[rows], config, params, rng=rng)
    return nx.cross_entropy(classify(states, params, config, strategy), task.labels[rows])


def accuracy(config, params, task: SyntheticTask, strategy=None, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(task), batch_size):
        rows = slice(start, start + batch_size)
        states = encode(task.tokens[rows], task.pad[rows], config, params)
        scores = classify(states, params, config, strategy).data
        correct += int((scores.argmax(-1) == task.labels[rows]).sum())
    return correct / max(len(task), 1)


def finetune(
    config: ModelConfig,
    params: EncoderParams | None,
    train_task: SyntheticTask,
    dev_task: SyntheticTask,
    *,
    strategy: str = "pooled",
    steps: int = 500,
    batch_size: int = 32,
    peak_lr: float = 1e-3,
    warmup_steps: int = 50,
    weight_decay: float = 0.01,
    seed: int = 0,
) -> dict:
    """Train encoder and classifier on ``train_task``; report dev accuracy."""
    if train_task.labels is None:
        raise ValueError(f"{train_task.kind} is not a classification task")
    if strategy not in ("pooled", "cls"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if params is None:
        params = init_params(config.replace(num_classes=0), seed)
    params = params.copy()
    params, config = add_classifier(params, config, train_task.num_classes, seed)
    rng = np.random.default_rng(seed)
    schedule = ScheduleConfig(peak_lr, min(warmup_steps, max(steps, 1)), max(steps, 1))
    opt = OptimizerConfig(weight_decay=weight_decay)
    state = AdamState()
    losses = []
    for step in range(1, steps + 1):
        rows = rng.integers(0, len(train_task), size=batch_size)
        loss = classification_loss(config, params, train_task, rows, strategy)
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"non-finite loss at step {step}")
        adam_step(params, nx.grad(loss, params.tensors), state, opt, lr_at(step, schedule))
        losses.append(float(loss.data))
    return {
        "task": train_task.kind,
        "model": config.name,
        "strategy": strategy,
        "steps": steps,
        "dev_accuracy": accuracy(config, params, dev_task, strategy),
        "final_train_loss": float(np.mean(losses[-20:])) if losses else None,
        "params": params,
        "config": config,
    }


def bag_of_words_accuracy(train_task: SyntheticTask, dev_task: SyntheticTask, steps: int = 300, seed: int = 0) -> float:
    """Multinomial logistic regression on token counts (order-blind baseline)."""
    V, C = train_task.vocab_size, train_task.num_classes

    def counts(task):
        out = np.zeros((len(task), V))
        for r in range(len(task)):
            np.add.at(out[r], task.tokens[r][task.pad[r]], 1.0)
        return out

    xtr, xdev = counts(train_task), counts(dev_task)
    rng = np.random.default_rng(seed)
    w = nx.parameter(rng.normal(0, 0.01, size=(V, C)))
    b = nx.parameter(np.zeros(C))
    params = {"w": w, "b": b}
    state = AdamState()
    opt = OptimizerConfig(weight_decay=0.0)
    x = nx.constant(xtr)
    for _ in range(steps):
        loss = nx.cross_entropy(x @ w + b, train_task.labels)
        adam_step(params, nx.grad(loss, params), state, opt, 0.05)
    pred = (xdev @ w.data + b.data).argmax(-1)
    return float((pred == dev_task.labels).mean())


def write_manifest(path, payload: dict) -> None:
    container.atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
