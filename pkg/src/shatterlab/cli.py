"""Command-line entry point: ``shatterlab <command> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, benchkit, container
from .config import (
    ABLATION_LABELS,
    ABLATION_LADDER,
    MODEL_PRESETS,
    ConfigError,
    ModelConfig,
    base_config,
    load_run_config,
    preset,
)
from .encoder import extend_max_length, init_params, load_checkpoint, save_checkpoint
from .partition import PartitionSpec, partition_table
from .pretrain import (
    PACKING_POLICY,
    TASK_KINDS,
    Corpus,
    NumericError,
    TrainConfig,
    bag_of_words_accuracy,
    finetune,
    synthetic_task,
    toy_corpus_lines,
    train,
    write_manifest,
)

log = logging.getLogger("shatterlab")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(RuntimeError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _train_config(section: dict, steps: int | None) -> TrainConfig:
    if steps is not None:
        section = {**section, "steps": steps}
    try:
        tc = TrainConfig.from_dict(section)
        tc.masking()
        tc.schedule()
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc
    if tc.steps < 0:
        raise ConfigError("train.steps", "must be >= 0")
    return tc


def _load_corpus(corpus: str | None, vocab_size: int, toy_seed: int) -> tuple[Corpus, dict]:
    if corpus is None:
        lines = toy_corpus_lines(toy_seed)
        source = {"source": "toy", "toy_seed": toy_seed}
    else:
        path = Path(corpus)
        if not path.is_file():
            raise DataError(f"corpus file {corpus} not found")
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except UnicodeDecodeError as exc:
            raise DataError(f"corpus is not UTF-8: {exc}") from exc
        source = {"source": str(path.resolve()), "sha256": _sha256(path)}
    data = Corpus.from_lines(lines, max_vocab=vocab_size)
    if len(data.documents) < 2:
        raise DataError("corpus needs at least two non-empty documents")
    source["fingerprint"] = data.fingerprint()
    source["vocab_size"] = data.vocab_size
    return data, source


def _resolve(args) -> tuple[ModelConfig, dict]:
    """Model config and train section from ``--config`` or a previous run's manifest."""
    if getattr(args, "manifest", None):
        m = json.loads(Path(args.manifest).read_text())
        return ModelConfig.from_dict(m["config"]), m["train"]
    if not args.config:
        raise ConfigError("config", "pass --config or --manifest")
    return load_run_config(args.config)


def _run_pretrain(cfg, train_section, args, out: Path, corpus_arg, toy_seed, seed) -> dict:
    tc = _train_config(train_section, args.steps)
    data, source = _load_corpus(corpus_arg, cfg.vocab_size, toy_seed)
    data.save_cache(out / "tokens.bin")
    tr, va = data.split(0.1)
    spec = cfg.partition_spec()
    manifest = {
        "command": "pretrain",
        "argv": sys.argv[1:],
        "code_version": __version__,
        "config": cfg.to_dict(),
        "train": tc.to_dict(),
        "seed": seed,
        "deterministic": bool(args.deterministic),
        "corpus": source,
        "packing": PACKING_POLICY,
        "partition": spec.to_dict() if spec else None,
    }
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", manifest)
    metrics, _ = train(
        cfg,
        tr.pack(cfg.max_len),
        va.pack(cfg.max_len),
        tc,
        out,
        seed=seed,
        deterministic=bool(args.deterministic),
        resume=bool(getattr(args, "resume", False)),
    )
    return {"manifest": manifest, "metrics": metrics}


def cmd_pretrain(args) -> int:
    cfg, train_section = _resolve(args)
    corpus, toy_seed, seed = args.corpus, args.toy_seed, args.seed
    if args.manifest:
        m = json.loads(Path(args.manifest).read_text())
        seed = m["seed"] if args.seed is None else args.seed
        src = m["corpus"]
        corpus = None if src["source"] == "toy" else src["source"]
        toy_seed = src.get("toy_seed", 0)
    seed = 0 if seed is None else seed
    out = Path(args.out)
    res = _run_pretrain(cfg, train_section, args, out, corpus, toy_seed, seed)
    rows = res["metrics"].rows
    last = f"valid loss {rows[-1]['valid_loss']:.4f} at step {rows[-1]['step']}" if rows else "no steps run"
    print(f"{cfg.name}: {last}; outputs in {out}")
    return 0


def cmd_ablate(args) -> int:
    base, train_section = load_run_config(args.config)
    tc_steps = args.steps
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    finals = {}
    curves: dict[str, dict[int, float]] = {}
    for name in ABLATION_LADDER:
        attention, use_pos = MODEL_PRESETS[name]
        cfg = base.replace(attention=attention, use_position_embeddings=use_pos, name=name)
        res = _run_pretrain(cfg, train_section, args, out / name, args.corpus, args.toy_seed, seed)
        curves[name] = {r["step"]: r["valid_loss"] for r in res["metrics"].rows}
        finals[name] = res["metrics"].rows[-1]["valid_loss"] if res["metrics"].rows else None
    steps = sorted({s for c in curves.values() for s in c})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [ABLATION_LABELS[n] for n in ABLATION_LADDER])
    for s in steps:
        w.writerow([s] + [repr(curves[n][s]) if s in curves[n] else "" for n in ABLATION_LADDER])
    container.atomic_write_text(out / "ablation.csv", buf.getvalue())
    for name in ABLATION_LADDER:
        val = finals[name]
        print(f"{ABLATION_LABELS[name]:<12} {'-' if val is None else f'{val:.4f}'}")
    return 0


def cmd_finetune_toy(args) -> int:
    if args.task not in TASK_KINDS:
        raise ConfigError("task", f"choose from {TASK_KINDS}")
    if args.task == "copy_mlm":
        raise ConfigError("task", "copy_mlm is an MLM task; finetune-toy needs a labeled task")
    if args.strategy not in ("pooled", "cls"):
        raise ConfigError("strategy", "must be 'pooled' or 'cls'")
    seed = 0 if args.seed is None else args.seed
    if args.checkpoint:
        cfg, params, _, _ = load_checkpoint(args.checkpoint)
        source = {"checkpoint": str(Path(args.checkpoint).resolve()), "sha256": _sha256(args.checkpoint)}
    else:
        cfg, _ = load_run_config(args.config or "shatter_toy")
        params, source = None, {"checkpoint": None}
    length = cfg.max_len
    kw = dict(length=length, vocab_size=cfg.vocab_size)
    tr = synthetic_task(args.task, seed=1000 + seed, n=args.train_size, **kw)
    dev = synthetic_task(args.task, seed=2000 + seed, n=args.dev_size, **kw)
    steps = 600 if args.steps is None else args.steps
    res = finetune(cfg, params, tr, dev, strategy=args.strategy, steps=steps, peak_lr=args.lr, seed=seed)
    report = {
        "command": "finetune-toy",
        "argv": sys.argv[1:],
        "code_version": __version__,
        "config": cfg.to_dict(),
        "task": args.task,
        "strategy": args.strategy,
        "steps": steps,
        "seed": seed,
        "init": source,
        "dev_accuracy": res["dev_accuracy"],
        "bag_of_words_accuracy": bag_of_words_accuracy(tr, dev, seed=seed),
        "deterministic": bool(args.deterministic),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", report)
    print(
        f"{cfg.name} {args.task} [{args.strategy}]: dev accuracy {report['dev_accuracy']:.3f} "
        f"(bag of words {report['bag_of_words_accuracy']:.3f})"
    )
    return 0


def _size_config(name: str, size: str) -> ModelConfig:
    if size == "toy" or name not in MODEL_PRESETS:
        cfg, _ = load_run_config(name)
        return cfg
    return base_config(name, large=size == "large")


def cmd_params(args) -> int:
    cfg = _size_config(args.config, args.size)
    total = benchkit.count_params(cfg)
    report = {
        "model": cfg.name,
        "size": args.size,
        "convention": benchkit.PARAM_CONVENTION,
        "per_layer": benchkit.per_layer_params(cfg),
        "total": total,
        "human": benchkit.millions(total),
    }
    if cfg.attention.value == "multihead_softmax" and not cfg.attention.uses_mask:
        report["xlnet_style_total"] = benchkit.count_params_xlnet(cfg)
    flag = benchkit.large_discrepancy(cfg, total)
    if flag:
        report["discrepancy"] = flag
    print(f"{cfg.name} ({args.size}): {total:,} = {report['human']}")
    if flag:
        print(f"  note: published total {flag['published_total']:,} differs; {flag['note']}")
    if args.out:
        container.atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _size_config(args.config, args.size)
    report = benchkit.cost_report(cfg, batch=args.batch, length=args.length, timing_steps=args.timing_steps)
    f = report["flops"]
    print(
        f"{cfg.name}: params {report['totals']['params_human']}, "
        f"attention FLOPs/layer {f['per_layer']:,} at l={f['length']}, "
        f"activations {report['memory_bytes']['total'] / 2**20:.1f} MiB"
    )
    if report["ms_per_step"]:
        print(f"median {report['ms_per_step']['median_ms']:.1f} ms/step over {report['ms_per_step']['steps']} steps")
    if args.out:
        container.atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_partition_plot(args) -> int:
    spec = PartitionSpec(args.parts, args.layers)
    rows = partition_table(spec, radius=args.radius)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "part", "x", "weight"])
    for layer, part, x, weight in rows:
        w.writerow([layer, part, x, repr(float(weight))])
    container.atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_extend(args) -> int:
    cfg, params, manifest, _ = load_checkpoint(args.checkpoint)
    new_params, new_cfg = extend_max_length(params, cfg, args.length, seed=0 if args.seed is None else args.seed)
    added = new_params.num_values() - params.num_values()
    save_checkpoint(args.out, new_cfg, new_params, step=manifest.get("step", 0), seed=manifest.get("seed", 0))
    print(
        f"{cfg.name}: max_len {cfg.max_len} -> {new_cfg.max_len}, added {added} parameters, "
        f"counted params {benchkit.count_params(cfg)} -> {benchkit.count_params(new_cfg)}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shatterlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="preset name or YAML file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true", help="omit wall-clock timings from outputs")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("pretrain", help="MLM pretraining run")
    common(p)
    p.add_argument("--manifest", help="rerun from a previous run's manifest.json")
    p.add_argument("--corpus", help="UTF-8 text, one document per line (default: generated toy corpus)")
    p.add_argument("--toy-seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="run the seven-step ablation ladder")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--toy-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate, config="shatter_toy")

    p = sub.add_parser("finetune-toy", help="train a classifier on a synthetic task")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--task", default="position_probe")
    p.add_argument("--strategy", default="pooled")
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--dev-size", type=int, default=500)
    p.set_defaults(func=cmd_finetune_toy)

    for name, func in (("params", cmd_params), ("bench", cmd_bench)):
        p = sub.add_parser(name, help="parameter count" if name == "params" else "cost report")
        common(p, out_required=False)
        p.add_argument("--size", choices=("toy", "base", "large"), default="base")
        if name == "bench":
            p.add_argument("--length", type=int, default=None)
            p.add_argument("--batch", type=int, default=1)
            p.add_argument("--timing-steps", type=int, default=0)
        p.set_defaults(func=func, config="bert")

    p = sub.add_parser("partition-plot", help="partition-of-unity curves as CSV")
    common(p)
    p.add_argument("--parts", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--radius", type=int, default=64)
    p.set_defaults(func=cmd_partition_plot)

    p = sub.add_parser("extend", help="extend a checkpoint's maximum length")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--length", type=int, required=True)
    p.set_defaults(func=cmd_extend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, container.ContainerError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
