"""Model configuration, named presets, and strict config-file loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attention import AttentionVariant
from .partition import PartitionSpec, t5_boundaries

# special token ids
CLS, SEP, PAD, MASK = 0, 1, 2, 3
NUM_SPECIAL = 4


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# Ablation-ladder and baseline names -> (attention variant, absolute position embeddings)
MODEL_PRESETS: dict[str, tuple[AttentionVariant, bool]] = {
    "bert": (AttentionVariant.MULTIHEAD_SOFTMAX, True),
    "no_position": (AttentionVariant.MULTIHEAD_SOFTMAX, False),
    "part_mask": (AttentionVariant.PART_MASK, False),
    "1h_softmax": (AttentionVariant.ONEHEAD_SOFTMAX, False),
    "1h_sigmoid": (AttentionVariant.ONEHEAD_SIGMOID, False),
    "part_bias": (AttentionVariant.PART_BIAS, False),
    "shatter": (AttentionVariant.SHATTER, False),
    "rpe": (AttentionVariant.RPE, False),
    "rab": (AttentionVariant.RAB, True),
}

ABLATION_LADDER = ("bert", "no_position", "part_mask", "1h_softmax", "1h_sigmoid", "part_bias", "shatter")

ABLATION_LABELS = {
    "bert": "BERT",
    "no_position": "No_Position",
    "part_mask": "Part_Mask",
    "1h_softmax": "1H_Softmax",
    "1h_sigmoid": "1H_Sigmoid",
    "part_bias": "Part_Bias",
    "shatter": "Shatter",
    "rpe": "BERT-RPE",
    "rab": "BERT-RAB",
}


@dataclass(frozen=True)
class ModelConfig:
    attention: AttentionVariant = AttentionVariant.SHATTER
    use_position_embeddings: bool = False
    num_layers: int = 2
    hidden: int = 64
    parts: int = 4
    ffn: int = 256
    vocab_size: int = 64
    max_len: int = 32
    rpe_clip: int = 128
    rab_buckets: int = 32
    rab_max_distance: int = 128
    cls_strategy: str = "pooled"
    num_classes: int = 0
    alphas: tuple[float, ...] = field(default=())
    betas: tuple[float, ...] = field(default=())
    init_std: float = 0.02
    dropout: float = 0.0
    name: str = "shatter"

    def __post_init__(self):
        object.__setattr__(self, "attention", AttentionVariant(self.attention))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        self.validate()

    def validate(self) -> None:
        v = self.attention
        for name in ("num_layers", "hidden", "parts", "ffn", "vocab_size", "max_len"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < (0 if name == "num_layers" else 1):
                raise ConfigError(name, f"must be a positive integer, got {val!r}")
        if self.vocab_size <= NUM_SPECIAL:
            raise ConfigError("vocab_size", f"must exceed the {NUM_SPECIAL} reserved special ids")
        if self.use_position_embeddings and v not in (AttentionVariant.MULTIHEAD_SOFTMAX, AttentionVariant.RAB):
            raise ConfigError("use_position_embeddings", f"not allowed for attention {v.value}")
        if v is AttentionVariant.RAB and not self.use_position_embeddings:
            raise ConfigError("use_position_embeddings", "RAB keeps absolute position embeddings")
        if self.hidden % self.parts:
            raise ConfigError("parts", f"hidden size {self.hidden} is not divisible by {self.parts}")
        if v.uses_mask and self.parts % 2:
            raise ConfigError("parts", "partition masks need an even part count")
        if self.cls_strategy not in ("pooled", "cls"):
            raise ConfigError("cls_strategy", "must be 'pooled' or 'cls'")
        if self.rpe_clip < 1:
            raise ConfigError("rpe_clip", "must be >= 1")
        if self.rab_buckets < 2:
            raise ConfigError("rab_buckets", "must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if (self.alphas or self.betas) and v.uses_mask:
            try:
                self.partition_spec()
            except ValueError as exc:
                raise ConfigError("alphas", str(exc)) from exc

    @property
    def head_dim(self) -> int:
        return self.hidden // self.parts

    def partition_spec(self) -> PartitionSpec | None:
        if not self.attention.uses_mask or self.num_layers == 0:
            return None
        return PartitionSpec(self.parts, self.num_layers, self.alphas, self.betas)

    def rab_boundaries(self):
        return t5_boundaries(self.rab_buckets, self.rab_max_distance)

    @property
    def rab_rows(self) -> int:
        return len(self.rab_boundaries()) - 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["attention"] = self.attention.value
        out["alphas"] = list(self.alphas)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("attention", str(exc)) from exc


def preset(name: str, **overrides) -> ModelConfig:
    """Toy-sized config for one of :data:`MODEL_PRESETS`, with field overrides."""
    if name not in MODEL_PRESETS:
        raise ConfigError("preset", f"unknown model {name!r}; choose from {sorted(MODEL_PRESETS)}")
    attention, use_pos = MODEL_PRESETS[name]
    base = dict(attention=attention, use_position_embeddings=use_pos, name=name)
    base.update(overrides)
    return ModelConfig.from_dict(base)


def base_config(name: str, large: bool = False, **overrides) -> ModelConfig:
    """Full-size configurations used for parameter accounting."""
    if large:
        size = dict(num_layers=24, hidden=1024, parts=16, ffn=4096)
    else:
        size = dict(num_layers=12, hidden=768, parts=12, ffn=3072)
    size.update(vocab_size=32000, max_len=512)
    size.update(overrides)
    return preset(name, **size)


# ---------------------------------------------------------------------------
# run configuration files
# ---------------------------------------------------------------------------

TRAIN_KEYS = {
    "steps",
    "batch_size",
    "peak_lr",
    "warmup_steps",
    "weight_decay",
    "eval_every",
    "checkpoint_every",
    "eval_batches",
    "mask_fraction",
    "mask_split",
}

TOY_PRESETS = {
    "shatter_toy": "shatter",
    "bert_toy": "bert",
    "rpe_toy": "rpe",
    "rab_toy": "rab",
}


def load_run_config(spec: str) -> tuple[ModelConfig, dict]:
    """Resolve ``--config``: a preset name (``shatter_toy``, ``bert``...) or a YAML/JSON file.

    A file holds ``model:`` (ModelConfig fields, optionally ``preset:``) and an
    optional ``train:`` section; unknown keys raise :class:`ConfigError`.
    """
    if spec in TOY_PRESETS or spec in MODEL_PRESETS:
        return preset(TOY_PRESETS.get(spec, spec)), {}
    path = Path(spec)
    if not path.exists():
        raise ConfigError("config", f"no preset or file named {spec!r}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    model = dict(data.get("model") or {})
    name = model.pop("preset", None)
    cfg = preset(name, **model) if name else ModelConfig.from_dict(model)
    train = dict(data.get("train") or {})
    bad = sorted(set(train) - TRAIN_KEYS)
    if bad:
        raise ConfigError(f"train.{bad[0]}", "unknown key")
    return cfg, train
